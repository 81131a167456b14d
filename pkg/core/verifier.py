"""
Event verifier for Aulos.
Confirms claimed physical events against trusted sensor readings, either from
a local ground-truth feed or from neighbor devices over a line protocol.
"""

import bisect
import logging
import math
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import VerifierConfig, parse_address
from .event_analysis import EventSpec, Predicate
from .fsa_model import TraceFormatError

logger = logging.getLogger(__name__)

LOCAL = "local"
MAX_LINE = 1024


class VerifierError(Exception):
    pass


class VerifierUnavailable(VerifierError):
    pass


class NeighborTimeout(VerifierUnavailable):
    pass


class ProtocolViolation(VerifierError):
    pass


class RemoteError(VerifierError):
    pass


class UnknownSensor(RemoteError):
    pass


class Verdict(Enum):
    HOLDS = "holds"
    CONTRADICTED = "contradicted"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class SensorReading:
    sensor: str
    value: float
    timestamp: float
    source: str = LOCAL

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite reading for {self.sensor}: {self.value}")


# ============================================
# SENSOR FEED
# ============================================

class SensorFeed:
    """Time-ordered readings per sensor; safe to read from several threads."""

    def __init__(self, source: str = LOCAL):
        self.source = source
        self._lock = threading.Lock()
        self._times: Dict[str, List[float]] = {}
        self._values: Dict[str, List[float]] = {}
        self._arrays: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def add(self, sensor: str, timestamp: float, value: float) -> None:
        with self._lock:
            times = self._times.setdefault(sensor, [])
            values = self._values.setdefault(sensor, [])
            i = bisect.bisect_right(times, timestamp)
            times.insert(i, timestamp)
            values.insert(i, value)
            self._arrays.pop(sensor, None)

    def extend(self, readings: Iterable[SensorReading]) -> "SensorFeed":
        for r in readings:
            self.add(r.sensor, r.timestamp, r.value)
        return self

    def sensors(self) -> List[str]:
        with self._lock:
            return sorted(self._times)

    def __contains__(self, sensor: str) -> bool:
        with self._lock:
            return sensor in self._times

    def __len__(self) -> int:
        with self._lock:
            return sum(len(t) for t in self._times.values())

    def _series(self, sensor: str) -> Tuple[np.ndarray, np.ndarray]:
        with self._lock:
            if sensor not in self._times:
                return np.empty(0), np.empty(0)
            if sensor not in self._arrays:
                self._arrays[sensor] = (np.asarray(self._times[sensor], dtype=float),
                                        np.asarray(self._values[sensor], dtype=float))
            return self._arrays[sensor]

    def readings(self, sensor: str) -> List[SensorReading]:
        times, values = self._series(sensor)
        return [SensorReading(sensor, float(v), float(t), self.source) for t, v in zip(times, values)]

    def latest(self, sensor: str, at: Optional[float] = None) -> Optional[SensorReading]:
        """Newest reading taken at or before `at` (or overall when `at` is None)."""
        times, values = self._series(sensor)
        if not len(times):
            return None
        i = len(times) if at is None else int(np.searchsorted(times, at, side="right"))
        if i == 0:
            return None
        return SensorReading(sensor, float(values[i - 1]), float(times[i - 1]), self.source)

    def nearest(self, sensor: str, at: float, k: int, staleness: float) -> List[SensorReading]:
        """Up to k readings closest to `at` (either side) within the staleness bound."""
        times, values = self._series(sensor)
        if not len(times):
            return []
        lo = int(np.searchsorted(times, at - staleness, side="left"))
        hi = int(np.searchsorted(times, at + staleness, side="right"))
        window = np.arange(lo, hi)
        order = window[np.argsort(np.abs(times[lo:hi] - at), kind="stable")][:k]
        return [SensorReading(sensor, float(values[i]), float(times[i]), self.source) for i in sorted(order)]

    def reading(self, sensor: str, at: Optional[float] = None) -> Optional[SensorReading]:
        return self.latest(sensor, at)


def load_sensor_log(path, source: str = LOCAL) -> SensorFeed:
    """Read `<timestamp> <sensor_name> <value>` lines."""
    feed = SensorFeed(source)
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 3:
                raise TraceFormatError(f"expected '<timestamp> <sensor> <value>', got {text!r}", lineno)
            try:
                timestamp, value = float(parts[0]), float(parts[2])
            except ValueError:
                raise TraceFormatError(f"bad number in {text!r}", lineno)
            if not math.isfinite(value):
                raise TraceFormatError(f"non-finite value {parts[2]!r}", lineno)
            feed.add(parts[1], timestamp, value)
    return feed


def format_sensor_log(readings: Iterable[SensorReading]) -> str:
    return "".join(f"{r.timestamp:.6f} {r.sensor} {r.value:.4f}\n" for r in readings)


def write_sensor_log(readings: Iterable[SensorReading], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(readings, key=lambda r: (r.timestamp, r.sensor))
    with open(path, "w") as f:
        f.write(format_sensor_log(ordered))
    return path


# ============================================
# VERIFICATION
# ============================================

def vote(predicate: Predicate, readings: Sequence[SensorReading], quorum: int) -> Verdict:
    """Majority vote of the predicate over readings; needs `quorum` readings and a strict majority."""
    if len(readings) < quorum:
        return Verdict.UNKNOWN
    yes = sum(1 for r in readings if predicate.evaluate(r.value))
    no = len(readings) - yes
    if yes == no:
        return Verdict.UNKNOWN
    return Verdict.HOLDS if yes > no else Verdict.CONTRADICTED


def _literal(verdict: Verdict, positive: bool) -> Verdict:
    if verdict == Verdict.UNKNOWN or positive:
        return verdict
    return Verdict.CONTRADICTED if verdict == Verdict.HOLDS else Verdict.HOLDS


def verify_binary(event: EventSpec, positive: bool, at: float, feed: SensorFeed,
                  k: int = 3, staleness: float = 1.0) -> Verdict:
    """Does the event literal (event, or its negation) hold at `at` according to `feed`?"""
    if event.predicate is None:
        return Verdict.UNKNOWN
    readings = feed.nearest(event.predicate.sensor, at, k, staleness)
    return _literal(vote(event.predicate, readings, k // 2 + 1), positive)


@dataclass(frozen=True)
class AverageResult:
    value: float
    readings: Tuple[SensorReading, ...]
    degraded: bool


def sample_average(sensor: str, at: Optional[float], sources: Sequence,
                   staleness: Optional[float] = None) -> AverageResult:
    """Mean of the freshest reading from every source that answers."""
    readings = []
    for source in sources:
        try:
            reading = source.reading(sensor, at)
        except (VerifierUnavailable, RemoteError, ProtocolViolation) as e:
            logger.warning("no %s reading from %s: %s", sensor, getattr(source, "source", source), e)
            continue
        if reading is None:
            continue
        if staleness is not None and at is not None and at - reading.timestamp > staleness:
            continue
        readings.append(reading)
    if not readings:
        raise VerifierUnavailable(f"no source answered for {sensor}")
    value = float(np.mean([r.value for r in readings]))
    return AverageResult(value, tuple(readings), len(readings) < len(sources))


# ============================================
# WIRE PROTOCOL
# ============================================

def encode_request(sensor: str, at: Optional[float] = None) -> str:
    if at is None:
        return f"READ {sensor}\n"
    return f"READ {sensor} {at:.6f}\n"


def decode_request(line: str) -> Tuple[str, Optional[float]]:
    parts = line.strip().split()
    if not parts or parts[0] != "READ" or len(parts) not in (2, 3):
        raise ProtocolViolation(f"malformed request {line.strip()!r}")
    at = None
    if len(parts) == 3:
        try:
            at = float(parts[2])
        except ValueError:
            raise ProtocolViolation(f"bad timestamp in request {line.strip()!r}")
        if not math.isfinite(at):
            raise ProtocolViolation(f"bad timestamp in request {line.strip()!r}")
    return parts[1], at


def encode_response(reading: SensorReading) -> str:
    return f"OK {reading.sensor} {reading.value:.2f} {reading.timestamp:.3f}\n"


def encode_error(reason: str) -> str:
    return f"ERR {reason}\n"


def decode_response(line: str, source: str = LOCAL) -> SensorReading:
    parts = line.strip().split()
    if not parts:
        raise ProtocolViolation("empty response")
    if parts[0] == "ERR":
        reason = " ".join(parts[1:]) or "unspecified"
        if reason == "unknown-sensor":
            raise UnknownSensor(reason)
        raise RemoteError(reason)
    if parts[0] != "OK" or len(parts) != 4:
        raise ProtocolViolation(f"malformed response {line.strip()!r}")
    try:
        return SensorReading(parts[1], float(parts[2]), float(parts[3]), source)
    except ValueError:
        raise ProtocolViolation(f"malformed response {line.strip()!r}")


# ============================================
# SERVER
# ============================================

class ReplayClock:
    """Maps wall time onto feed time; speed 0 serves the newest reading."""

    def __init__(self, start: float = 0.0, speed: float = 1.0):
        self.start = start
        self.speed = speed
        self._wall = time.monotonic()

    def now(self) -> Optional[float]:
        if self.speed <= 0:
            return None
        return self.start + (time.monotonic() - self._wall) * self.speed


class SensorRequestHandler(socketserver.StreamRequestHandler):
    """One connection; answers READ lines until the client hangs up."""

    def handle(self):
        feed: SensorFeed = self.server.feed
        clock: ReplayClock = self.server.clock
        while True:
            raw = self.rfile.readline(MAX_LINE + 1)
            if not raw:
                break
            if len(raw) > MAX_LINE:
                while raw and not raw.endswith(b"\n"):
                    raw = self.rfile.readline(MAX_LINE + 1)
                logger.debug("%s: request over %d bytes", self.client_address[0], MAX_LINE)
                self.wfile.write(encode_error("malformed-request").encode())
                continue
            try:
                line = raw.decode("utf-8")
                sensor, at = decode_request(line)
            except (UnicodeDecodeError, ProtocolViolation) as e:
                logger.debug("%s: %s", self.client_address[0], e)
                self.wfile.write(encode_error("malformed-request").encode())
                continue
            if sensor not in feed:
                self.wfile.write(encode_error("unknown-sensor").encode())
                continue
            reading = feed.latest(sensor, at if at is not None else clock.now())
            if reading is None:
                self.wfile.write(encode_error("no-reading").encode())
                continue
            self.wfile.write(encode_response(reading).encode())


class VerifierServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: Tuple[str, int], feed: SensorFeed, clock: Optional[ReplayClock] = None):
        self.feed = feed
        self.clock = clock or ReplayClock(speed=0)
        super().__init__(address, SensorRequestHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def start_server(feed: SensorFeed, bind: str = "127.0.0.1:0",
                 clock: Optional[ReplayClock] = None) -> Tuple[VerifierServer, threading.Thread]:
    """Serve `feed` from a background thread; call server.shutdown() to stop."""
    server = VerifierServer(parse_address(bind), feed, clock)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    logger.info("verifier serving %s on %s", ", ".join(feed.sensors()), server.address)
    return server, thread


def serve(feed: SensorFeed, bind: str, clock: Optional[ReplayClock] = None) -> None:
    with VerifierServer(parse_address(bind), feed, clock) as server:
        logger.info("verifier serving %s on %s", ", ".join(feed.sensors()), server.address)
        server.serve_forever()


# ============================================
# CLIENT
# ============================================

class NeighborClient:
    """Persistent connection to one neighbor's verifier server."""

    def __init__(self, address: str, timeout: float = 0.5):
        self.source = address
        self.host, self.port = parse_address(address)
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None
        self._buffer = b""
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        try:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except socket.timeout:
            raise NeighborTimeout(f"{self.source}: connect timed out after {self.timeout}s")
        except OSError as e:
            raise VerifierUnavailable(f"{self.source}: {e}")
        sock.settimeout(self.timeout)
        return sock

    def _exchange(self, request: str) -> str:
        if self._sock is None:
            self._sock = self._connect()
            self._buffer = b""
        self._sock.sendall(request.encode())
        while b"\n" not in self._buffer:
            chunk = self._sock.recv(4096)
            if not chunk:
                raise ConnectionResetError("connection closed by neighbor")
            self._buffer += chunk
            if len(self._buffer) > MAX_LINE and b"\n" not in self._buffer:
                self.close()
                raise ProtocolViolation(f"{self.source}: response over {MAX_LINE} bytes")
        line, self._buffer = self._buffer.split(b"\n", 1)
        try:
            return line.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolViolation(f"{self.source}: response is not UTF-8")

    def read(self, sensor: str, at: Optional[float] = None) -> SensorReading:
        request = encode_request(sensor, at)
        with self._lock:
            for attempt in range(2):
                try:
                    line = self._exchange(request)
                    break
                except socket.timeout:
                    self.close()
                    raise NeighborTimeout(f"{self.source}: no answer within {self.timeout}s")
                except (ConnectionError, BrokenPipeError) as e:
                    self.close()
                    if attempt:
                        raise VerifierUnavailable(f"{self.source}: {e}")
        return decode_response(line, self.source)

    def reading(self, sensor: str, at: Optional[float] = None) -> Optional[SensorReading]:
        try:
            return self.read(sensor, at)
        except RemoteError as e:
            if isinstance(e, UnknownSensor):
                raise
            return None

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def query_neighbor(address: str, sensor: str, timeout: float = 0.5, at: Optional[float] = None) -> SensorReading:
    with NeighborClient(address, timeout) as client:
        return client.read(sensor, at)


# ============================================
# EVENT VERIFIER
# ============================================

class EventVerifier:
    """Answers the detector's literal and average queries from the configured sources."""

    def __init__(self, config: VerifierConfig, feed: Optional[SensorFeed] = None,
                 neighbors: Optional[Sequence] = None):
        if config.mode in ("local", "both") and feed is None:
            raise VerifierError(f"{config.mode} verification needs a sensor feed")
        self.config = config
        self.feed = feed
        if neighbors is None:
            neighbors = [NeighborClient(a, config.timeout) for a in config.neighbors]
        self.neighbors = list(neighbors) if config.mode != "local" else []

    def _neighbor_readings(self, sensor: str, at: float) -> List[SensorReading]:
        readings = []
        for neighbor in self.neighbors:
            try:
                reading = neighbor.reading(sensor, at)
            except VerifierError as e:
                logger.warning("neighbor %s: %s", getattr(neighbor, "source", neighbor), e)
                continue
            if reading is not None and abs(at - reading.timestamp) <= self.config.staleness:
                readings.append(reading)
        return readings

    def verify(self, event: EventSpec, positive: bool, at: float) -> Verdict:
        """Verdict on one literal at time `at`."""
        if event.predicate is None:
            return Verdict.UNKNOWN
        verdict = Verdict.UNKNOWN
        if self.feed is not None and self.config.mode in ("local", "both"):
            verdict = verify_binary(event, positive, at, self.feed, self.config.samples, self.config.staleness)
        if verdict == Verdict.UNKNOWN and self.neighbors:
            readings = self._neighbor_readings(event.predicate.sensor, at)
            verdict = _literal(vote(event.predicate, readings, len(self.neighbors) // 2 + 1), positive)
        return verdict

    def average(self, sensor: str, at: float) -> AverageResult:
        sources: List = []
        if self.feed is not None and self.config.mode in ("local", "both"):
            sources.append(self.feed)
        sources.extend(self.neighbors)
        return sample_average(sensor, at, sources, self.config.staleness)

    def close(self) -> None:
        for neighbor in self.neighbors:
            if hasattr(neighbor, "close"):
                neighbor.close()
