"""
Runtime detector for Aulos.
Replays syscall records against the eFSA, verifies claimed events at their
checkpoints and checks loop intensity against verified sensor values.
"""

import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple

from .config import DetectorSettings
from .event_analysis import CompositeEvent, format_alternatives
from .fsa_model import START, Edge, Efsa, TraceRecord, state_name, transition_edge
from .intensity_model import IntensityModel
from .verifier import EventVerifier, Verdict, VerifierError

logger = logging.getLogger(__name__)


class AnomalyKind(Enum):
    ILLEGAL_TRANSITION = "illegal_transition"
    EVENT_MISMATCH = "event_mismatch"
    INTENSITY_MISMATCH = "intensity_mismatch"
    VERIFIER_UNAVAILABLE = "verifier_unavailable"
    UNKNOWN_NGRAM = "unknown_ngram"
    FREQUENCY_OUTLIER = "frequency_outlier"


@dataclass
class AnomalyReport:
    kind: AnomalyKind
    timestamp: float
    state: int
    detail: str
    evidence: Dict[str, Any] = field(default_factory=dict)
    record: Optional[TraceRecord] = None
    window_index: Optional[int] = None
    counted: bool = True

    def format_line(self) -> str:
        return f"ANOMALY {self.kind.value} t={self.timestamp:.6f} state={state_name(self.state)} detail={self.detail}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "timestamp": self.timestamp,
            "state": state_name(self.state),
            "detail": self.detail,
            "evidence": self.evidence,
            "record": self.record.format() if self.record else None,
            "window_index": self.window_index,
            "counted": self.counted,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AnomalyReport":
        record = None
        if data.get("record"):
            t, pc, name = data["record"].split()
            record = TraceRecord(float(t), int(pc, 16), name)
        return cls(
            kind=AnomalyKind(data["kind"]),
            timestamp=float(data["timestamp"]),
            state=START if data["state"] == "s0" else int(data["state"], 16),
            detail=data.get("detail", ""),
            evidence=data.get("evidence", {}),
            record=record,
            window_index=data.get("window_index"),
            counted=data.get("counted", True),
        )


# ============================================
# CHECKPOINTS
# ============================================

@dataclass(frozen=True)
class CheckpointPolicy:
    binary: Dict[Edge, Tuple[CompositeEvent, ...]]
    intensity: Dict[Edge, Tuple[str, ...]]

    def __len__(self) -> int:
        return len(self.binary) + sum(len(v) for v in self.intensity.values())

    def describe(self) -> List[str]:
        lines = []
        for edge in sorted(self.binary):
            lines.append(f"binary    {_edge_text(edge)}  [{format_alternatives(self.binary[edge])}]")
        for edge in sorted(self.intensity):
            lines.append(f"intensity {_edge_text(edge)}  [{', '.join(self.intensity[edge])}]")
        return lines


def _edge_text(edge: Edge) -> str:
    return f"{state_name(edge.src)} --{edge.label}--> {state_name(edge.dst)}"


def checkpoint_policy(efsa: Efsa) -> CheckpointPolicy:
    """Binary checks on event-constrained edges, intensity checks on loop exit edges."""
    intensity: Dict[Edge, List[str]] = {}
    for loop_id in sorted(efsa.intensity_loops):
        for edge in efsa.intensity_loops[loop_id].exit_edges:
            intensity.setdefault(edge, []).append(loop_id)
    return CheckpointPolicy(
        binary=dict(efsa.event_edges),
        intensity={edge: tuple(ids) for edge, ids in intensity.items()},
    )


def check_intensity(window_iterations: int, model: IntensityModel, verified_sensor: float, tolerance: float,
                    timestamp: float = 0.0, state: int = START) -> Optional[AnomalyReport]:
    """Anomaly iff the sensor value implied by the iteration count is more than `tolerance` off."""
    derived = model.derive_sensor(window_iterations)
    difference = abs(derived - verified_sensor)
    if difference > tolerance:
        return AnomalyReport(
            kind=AnomalyKind.INTENSITY_MISMATCH,
            timestamp=timestamp,
            state=state,
            detail=f"{model.loop_id} derived {model.sensor}={derived:.2f} verified={verified_sensor:.2f}",
            evidence={
                "loop_id": model.loop_id,
                "iterations": window_iterations,
                "derived": derived,
                "verified": verified_sensor,
                "difference": difference,
                "tolerance": tolerance,
            },
        )
    return None


# ============================================
# STEPPING
# ============================================

@dataclass
class LoopCounter:
    heads: int = 0
    visited: int = 0


@dataclass
class DetectorState:
    current: int = START
    last_syscall: Optional[str] = None
    window_index: int = -1
    counters: Dict[str, LoopCounter] = field(default_factory=dict)
    last_timestamp: Optional[float] = None
    records: int = 0


def _check_binary(edge: Edge, alternatives: Tuple[CompositeEvent, ...], rec: TraceRecord, efsa: Efsa,
                  verifier: EventVerifier, settings: DetectorSettings, state: DetectorState) -> Optional[AnomalyReport]:
    verdicts: Dict[str, str] = {}
    outcomes = []
    for alternative in alternatives:
        outcome = Verdict.HOLDS
        for literal in alternative.literals:
            key = str(literal)
            if key not in verdicts:
                try:
                    verdict = verifier.verify(efsa.event(literal.event_id), literal.positive, rec.timestamp)
                except VerifierError as e:
                    logger.warning("verifying %s: %s", key, e)
                    verdict = Verdict.UNKNOWN
                verdicts[key] = verdict.value
            verdict = Verdict(verdicts[key])
            if verdict == Verdict.CONTRADICTED:
                outcome = Verdict.CONTRADICTED
                break
            if verdict == Verdict.UNKNOWN:
                outcome = Verdict.UNKNOWN
        outcomes.append(outcome)
        if outcome == Verdict.HOLDS:
            return None

    evidence = {"edge": [state_name(edge.src), edge.label, state_name(edge.dst)],
                "constraint": format_alternatives(alternatives), "verdicts": verdicts}
    if all(o == Verdict.CONTRADICTED for o in outcomes):
        return AnomalyReport(AnomalyKind.EVENT_MISMATCH, rec.timestamp, rec.pc,
                             f"claimed [{format_alternatives(alternatives)}] not observed",
                             evidence, rec, state.window_index)
    return AnomalyReport(AnomalyKind.VERIFIER_UNAVAILABLE, rec.timestamp, rec.pc,
                         f"cannot verify [{format_alternatives(alternatives)}]",
                         evidence, rec, state.window_index, counted=not settings.fail_open)


def _check_loop(loop_id: str, rec: TraceRecord, efsa: Efsa, verifier: EventVerifier,
                settings: DetectorSettings, state: DetectorState) -> Optional[AnomalyReport]:
    loop = efsa.intensity_loops[loop_id]
    counter = state.counters.pop(loop_id, LoopCounter())
    if loop.model is None:
        return None
    tolerance = loop.tolerance if loop.tolerance is not None else settings.tolerance_for(loop_id)
    try:
        average = verifier.average(loop.model.sensor, rec.timestamp)
    except VerifierError as e:
        return AnomalyReport(AnomalyKind.VERIFIER_UNAVAILABLE, rec.timestamp, rec.pc,
                             f"no {loop.model.sensor} reading for {loop_id}: {e}",
                             {"loop_id": loop_id, "iterations": counter.heads}, rec, state.window_index,
                             counted=not settings.fail_open)
    report = check_intensity(counter.heads, loop.model, average.value, tolerance, rec.timestamp, rec.pc)
    if report is not None:
        report.record = rec
        report.window_index = state.window_index
        report.evidence["partial"] = counter.visited != counter.heads * loop.per_iteration_syscall_count
        report.evidence["degraded"] = average.degraded
    return report


def step(state: DetectorState, rec: TraceRecord, efsa: Efsa, verifier: Optional[EventVerifier],
         settings: Optional[DetectorSettings] = None, policy: Optional[CheckpointPolicy] = None) -> List[AnomalyReport]:
    """Consume one record; returns the anomalies it raises."""
    settings = settings or DetectorSettings()
    policy = policy or checkpoint_policy(efsa)
    reports: List[AnomalyReport] = []

    boundary = rec.pc == efsa.window_header
    if boundary:
        state.window_index += 1

    edge = transition_edge(state.current, state.last_syscall, rec)
    legal = efsa.fsa.accepts(edge, rec.syscall)
    if not legal:
        expected = [_edge_text(e) for e in efsa.fsa.out_edges(state.current)]
        reports.append(AnomalyReport(
            AnomalyKind.ILLEGAL_TRANSITION, rec.timestamp, state.current,
            f"{_edge_text(edge)} ({rec.syscall} at {state_name(rec.pc)})",
            {"edge": [state_name(edge.src), edge.label, state_name(edge.dst)], "expected": expected},
            rec, state.window_index,
        ))
        state.counters.clear()
    elif verifier is not None:
        for loop_id in policy.intensity.get(edge, ()):
            report = _check_loop(loop_id, rec, efsa, verifier, settings, state)
            if report is not None:
                reports.append(report)
        alternatives = policy.binary.get(edge)
        if alternatives:
            report = _check_binary(edge, alternatives, rec, efsa, verifier, settings, state)
            if report is not None:
                reports.append(report)

    if boundary:
        state.counters.clear()
    if legal:
        for loop_id, loop in efsa.intensity_loops.items():
            if rec.pc in loop.body_pcs:
                counter = state.counters.setdefault(loop_id, LoopCounter())
                counter.visited += 1
                if rec.pc == loop.head_pc:
                    counter.heads += 1

    state.current = rec.pc if legal or rec.pc in efsa.fsa.states else START
    state.last_syscall = rec.syscall
    state.last_timestamp = rec.timestamp
    state.records += 1
    return reports


# ============================================
# DETECTOR
# ============================================

@dataclass
class DetectorSummary:
    records: int = 0
    windows: int = 0
    reports: Counter = field(default_factory=Counter)
    anomalies: int = 0
    check_seconds: float = 0.0

    @property
    def mean_check_ms(self) -> float:
        return 1000.0 * self.check_seconds / self.records if self.records else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "records": self.records,
            "windows": self.windows,
            "reports": dict(sorted(self.reports.items())),
            "anomalies": self.anomalies,
            "mean_check_ms": self.mean_check_ms,
        }


class Detector:
    """Single-consumer streaming monitor over one ordered record stream."""

    def __init__(self, efsa: Efsa, verifier: Optional[EventVerifier] = None,
                 settings: Optional[DetectorSettings] = None):
        self.efsa = efsa
        self.verifier = verifier
        self.settings = settings or DetectorSettings()
        self.policy = checkpoint_policy(efsa)
        self.state = DetectorState()
        self.summary = DetectorSummary()

    def step(self, rec: TraceRecord) -> List[AnomalyReport]:
        started = time.perf_counter()
        reports = step(self.state, rec, self.efsa, self.verifier, self.settings, self.policy)
        self.summary.check_seconds += time.perf_counter() - started
        self.summary.records += 1
        self.summary.windows = self.state.window_index + 1
        for report in reports:
            self.summary.reports[report.kind.value] += 1
            if report.counted:
                self.summary.anomalies += 1
        return reports

    def run(self, records: Iterable[TraceRecord]) -> Iterator[AnomalyReport]:
        for rec in records:
            yield from self.step(rec)

    def monitor(self, records: Iterable[TraceRecord]) -> List[AnomalyReport]:
        return list(self.run(records))


def write_reports(reports: Iterable[AnomalyReport], path) -> Path:
    """One JSON object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for report in reports:
            f.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    return path


def load_reports(path) -> List[AnomalyReport]:
    reports = []
    with open(path) as f:
        for line in f:
            if line.strip():
                reports.append(AnomalyReport.from_dict(json.loads(line)))
    return reports


def summarize_reports(reports: Iterable[AnomalyReport]) -> Dict[str, Any]:
    by_kind: Counter = Counter()
    windows = set()
    first: Dict[str, float] = {}
    counted = 0
    for report in reports:
        by_kind[report.kind.value] += 1
        first.setdefault(report.kind.value, report.timestamp)
        if report.window_index is not None:
            windows.add(report.window_index)
        if report.counted:
            counted += 1
    return {
        "total": sum(by_kind.values()),
        "anomalies": counted,
        "by_kind": dict(sorted(by_kind.items())),
        "first_seen": dict(sorted(first.items())),
        "windows": sorted(windows),
    }
