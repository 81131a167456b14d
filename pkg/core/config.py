"""
Configuration for Aulos.
Pydantic models for the verifier, detector, plant and CLI runs, plus the
key = value config file reader.
"""

import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


DEFAULT_TOLERANCE = 3.0
DEFAULT_STALENESS = 1.0
DEFAULT_TIMEOUT = 0.5
DEFAULT_SAMPLES = 3


class VerifierConfig(BaseModel):
    mode: Literal["local", "distributed", "both"] = "local"
    neighbors: List[str] = Field(default_factory=list)
    samples: int = DEFAULT_SAMPLES
    staleness: float = DEFAULT_STALENESS
    timeout: float = DEFAULT_TIMEOUT
    sensor_log: Optional[str] = None

    @field_validator("samples")
    @classmethod
    def _odd_samples(cls, v: int) -> int:
        if v < 1 or v % 2 == 0:
            raise ValueError(f"samples must be odd and >= 1, got {v}")
        return v

    @field_validator("staleness", "timeout")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError(f"must be > 0, got {v}")
        return v

    @field_validator("neighbors")
    @classmethod
    def _addresses(cls, v: List[str]) -> List[str]:
        for address in v:
            parse_address(address)
        return v

    @model_validator(mode="after")
    def _neighbors_for_distributed(self) -> "VerifierConfig":
        if self.mode in ("distributed", "both") and not self.neighbors:
            raise ValueError(f"{self.mode} verification needs at least one neighbor")
        return self


class DetectorSettings(BaseModel):
    tolerance: float = DEFAULT_TOLERANCE
    loop_tolerances: Dict[str, float] = Field(default_factory=dict)
    fail_open: bool = True

    @field_validator("tolerance")
    @classmethod
    def _nonnegative(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"tolerance must be >= 0, got {v}")
        return v

    def tolerance_for(self, loop_id: str) -> float:
        return self.loop_tolerances.get(loop_id, self.tolerance)


class SensorProcess(BaseModel):
    """
    How a plant sensor evolves over scan cycles.

    band: uniform draw in [low, high] each cycle
    fixed: constant `base`
    levels: cycles through `levels`, `repeat` cycles each
    thermal: first-order heating toward `hot` while the heater is on, cooling to `ambient` otherwise
    """
    kind: Literal["band", "fixed", "levels", "thermal"] = "fixed"
    base: float = 0.0
    low: Optional[float] = None
    high: Optional[float] = None
    levels: List[float] = Field(default_factory=list)
    repeat: int = 1
    sigma: float = 0.0
    rate: float = 0.03
    hot: float = 100.0
    ambient: float = 25.0
    actuator: Optional[str] = None

    @field_validator("sigma")
    @classmethod
    def _sigma(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"sigma must be >= 0, got {v}")
        return v

    @model_validator(mode="after")
    def _shape(self) -> "SensorProcess":
        if self.kind == "band" and (self.low is None or self.high is None or self.low > self.high):
            raise ValueError("band sensors need low <= high")
        if self.kind == "levels" and not self.levels:
            raise ValueError("levels sensors need at least one level")
        if self.repeat < 1:
            raise ValueError("repeat must be >= 1")
        return self


class AttackSpec(BaseModel):
    kind: Literal["branch_spoof", "intensity_corrupt"]
    sensor: str
    value: Optional[float] = None
    value_range: Optional[Tuple[float, float]] = None
    start_cycle: int = 0
    end_cycle: Optional[int] = None
    function: Optional[str] = None

    @model_validator(mode="after")
    def _values(self) -> "AttackSpec":
        if (self.value is None) == (self.value_range is None):
            raise ValueError("give exactly one of value and value_range")
        values = [self.value] if self.value is not None else list(self.value_range)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("spoofed values must be finite")
        if self.value_range is not None and self.value_range[0] > self.value_range[1]:
            raise ValueError("value_range must be (low, high)")
        if self.start_cycle < 0 or (self.end_cycle is not None and self.end_cycle < self.start_cycle):
            raise ValueError("bad activation window")
        return self

    def active(self, cycle: int) -> bool:
        return self.start_cycle <= cycle and (self.end_cycle is None or cycle <= self.end_cycle)


class PlantConfig(BaseModel):
    program: str
    sensors: Dict[str, SensorProcess]
    constants: Dict[str, float] = Field(default_factory=dict)
    cycles: int = 50
    period: float = 1.0
    syscall_latency: float = 0.0005
    samples_per_cycle: int = 3
    neighbors: int = 2
    neighbor_sigma: float = 0.3
    seed: int = 0
    max_loop_iterations: int = 10_000

    @field_validator("cycles", "samples_per_cycle", "max_loop_iterations")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @field_validator("period")
    @classmethod
    def _period(cls, v: float) -> float:
        if not v > 0:
            raise ValueError(f"period must be > 0, got {v}")
        return v

    @field_validator("neighbor_sigma", "syscall_latency")
    @classmethod
    def _nonnegative(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"must be >= 0, got {v}")
        return v


class RunConfig(BaseModel):
    """Settings shared by the CLI subcommands; flags override the config file."""
    command: str = ""
    out_dir: str = "runs"
    seed: int = 0
    cycles: Optional[int] = None
    tolerance: float = DEFAULT_TOLERANCE
    fail_open: bool = True
    samples: int = DEFAULT_SAMPLES
    staleness: float = DEFAULT_STALENESS
    timeout: float = DEFAULT_TIMEOUT
    neighbors: List[str] = Field(default_factory=list)
    verifier_mode: Literal["local", "distributed", "both"] = "local"
    sensor_log: Optional[str] = None
    verifier: Optional[str] = None
    ngram: Optional[int] = None
    scfd: Optional[str] = None

    @model_validator(mode="after")
    def _expand_verifier(self) -> "RunConfig":
        if self.verifier:
            sensor_log, neighbors = parse_verifier_sources(self.verifier)
            self.sensor_log = self.sensor_log or sensor_log
            self.neighbors = self.neighbors or neighbors
        return self

    def verifier_config(self) -> VerifierConfig:
        return VerifierConfig(
            mode=self.verifier_mode,
            neighbors=self.neighbors,
            samples=self.samples,
            staleness=self.staleness,
            timeout=self.timeout,
            sensor_log=self.sensor_log,
        )

    def detector_settings(self) -> DetectorSettings:
        return DetectorSettings(tolerance=self.tolerance, fail_open=self.fail_open)


def parse_address(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)


def parse_verifier_sources(text: str) -> Tuple[Optional[str], List[str]]:
    """
    `local:<sensor log>` and `remote:<host:port>` items, comma-separated.

    An item without a prefix is a neighbor address. At most one local log.
    Returns (sensor_log, neighbors).
    """
    sensor_log: Optional[str] = None
    neighbors: List[str] = []
    for item in (part.strip() for part in text.split(",")):
        if not item:
            continue
        kind, sep, rest = item.partition(":")
        if kind == "local" and sep:
            if sensor_log is not None:
                raise ValueError(f"only one local sensor log allowed, got {text!r}")
            if not rest:
                raise ValueError("local: needs a sensor log path")
            sensor_log = rest
        else:
            address = rest if kind == "remote" and sep else item
            parse_address(address)
            neighbors.append(address)
    if sensor_log is None and not neighbors:
        raise ValueError(f"no verifier sources in {text!r}")
    return sensor_log, neighbors


def parse_model_kinds(values) -> Tuple[Optional[int], Optional[str]]:
    """`efsa`, `ngram:<n>` and `scfd:<auto|k>` selections; returns (ngram, scfd)."""
    ngram: Optional[int] = None
    scfd: Optional[str] = None
    for value in values or []:
        kind, _, arg = value.partition(":")
        if kind == "efsa" and not arg:
            continue
        if kind == "ngram" and arg.isdigit():
            ngram = int(arg)
        elif kind == "scfd" and (arg == "auto" or arg.isdigit()):
            scfd = arg
        else:
            raise ValueError(f"model must be efsa, ngram:<n> or scfd:<auto|k>, got {value!r}")
    return ngram, scfd


def read_config_file(path) -> Dict[str, str]:
    """`key = value` lines; `#` starts a comment; dashes in keys become underscores."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def build_run_config(file_values: Dict[str, str], flags: Dict[str, object]) -> RunConfig:
    """Defaults < config file < explicit (non-None) flags."""
    merged: Dict[str, object] = {}
    fields = RunConfig.model_fields
    for key, value in file_values.items():
        if key not in fields:
            raise ValueError(f"unknown config key '{key}'")
        if key == "neighbors":
            merged[key] = [v.strip() for v in value.split(",") if v.strip()]
        elif key == "fail_open":
            merged[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            merged[key] = value
    for key, value in flags.items():
        if value is not None and key in fields:
            merged[key] = value
    return RunConfig(**merged)
