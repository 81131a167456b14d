"""
Pipeline for Aulos.
Wires analysis, training and monitoring together for the CLI and the tests:
training runs on disk or from the simulator, model training with optional
baselines, and end-to-end scenario evaluation.
"""

import json
import logging
from contextlib import ExitStack
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from .baselines import (
    LabeledTrace, NgramDb, ScfdProfile, build_ngram_db, find_event_ngrams, ngram_detect,
    scfd_detect, scfd_fit,
)
from .config import DetectorSettings, VerifierConfig
from .detector import AnomalyKind, AnomalyReport, Detector, DetectorSummary
from .event_analysis import EventAnnotatedCfg, analyze_program
from .fsa_model import (
    Efsa, FsaError, TraceRecord, augment_efsa, learn_fsa, load_trace, partition_windows, state_name,
)
from .intensity_model import DegenerateFitError, fit_runs
from .mini_ir import Program, load_program
from .simulator import SimulationResult, resolve_program, scenario, simulate, training_scenario_for
from .verifier import EventVerifier, SensorFeed, load_sensor_log, start_server

logger = logging.getLogger(__name__)


# ============================================
# TRAINING RUNS
# ============================================

@dataclass
class TrainingRun:
    """One normal trace, with the sensor log and event ground truth recorded alongside it."""
    records: List[TraceRecord]
    feed: Optional[SensorFeed] = None
    truth: Optional[List[Dict[str, bool]]] = None
    name: str = ""

    @classmethod
    def from_simulation(cls, result: SimulationResult, name: str = "") -> "TrainingRun":
        return cls(result.records, result.feed(), result.truth, name or result.program)


def _stem(path: Path) -> Path:
    return path.with_name(path.name[: -len(".trace")]) if path.name.endswith(".trace") else path.with_suffix("")


def expand_trace_paths(sources: Iterable) -> List[Path]:
    """Files as given; directories expand to their `*.trace` files, sorted."""
    paths: List[Path] = []
    for raw in sources:
        path = Path(raw)
        if path.is_dir():
            found = sorted(path.glob("*.trace"))
            if not found:
                raise ValueError(f"{path}: no .trace files")
            paths.extend(found)
        else:
            paths.append(path)
    return paths


def discover_runs(trace_paths: Iterable, sensor_log: Optional[str] = None) -> List[TrainingRun]:
    """
    Load traces plus their companions.

    For `run.trace` the sensor log is `run.sensors.log` and the ground truth
    `run.truth.json`, when present. An explicit `sensor_log` applies to every
    trace that has no companion log of its own.
    """
    runs = []
    for raw in trace_paths:
        path = Path(raw)
        stem = _stem(path)
        log_path = stem.with_name(stem.name + ".sensors.log")
        truth_path = stem.with_name(stem.name + ".truth.json")
        feed = None
        if log_path.exists():
            feed = load_sensor_log(log_path)
        elif sensor_log:
            feed = load_sensor_log(sensor_log)
        truth = None
        if truth_path.exists():
            with open(truth_path) as f:
                truth = json.load(f).get("truth")
        runs.append(TrainingRun(load_trace(path), feed, truth, path.name))
        logger.debug("%s: %d records, sensors=%s, truth=%s", path.name, len(runs[-1].records),
                     "yes" if feed else "no", "yes" if truth else "no")
    return runs


# ============================================
# ANALYZE / TRAIN
# ============================================

def load_analyzed(ref: str, constants: Optional[Dict[str, float]] = None):
    """Parse a program (path or bundled name), apply constant overrides and analyze it."""
    program = load_program(resolve_program(ref))
    if constants:
        program = program.with_constants(constants)
    return program, analyze_program(program)


def train(program: Program, runs: Sequence[TrainingRun], annotated: Optional[EventAnnotatedCfg] = None,
          ngram: Optional[int] = None, scfd: Optional[str] = None, seed: int = 0) -> Efsa:
    """
    Learn the eFSA from normal runs and fit every control-intensity loop.

    `ngram` adds an n-gram database of that length to the model's baselines
    (event-dependent grams need ground truth in the runs); `scfd` ("auto" or a
    cluster count) adds a frequency-distribution profile.
    """
    if not runs:
        raise ValueError("training needs at least one trace")
    if annotated is None:
        annotated = analyze_program(program).annotated

    traces = [run.records for run in runs]
    fsa = learn_fsa(traces)
    efsa = augment_efsa(fsa, annotated, program)
    logger.info("%s: %d states, %d edges, %d event-constrained", program.name, len(fsa.states),
                len(fsa.edges), len(efsa.event_edges))

    windows: List[Any] = []
    if efsa.window_header is not None:
        for run in runs:
            try:
                windows.append(partition_windows(run.records, efsa.window_header))
            except FsaError as e:
                logger.warning("%s: %s", run.name or "trace", e)
                windows.append([])

    for loop_id, loop in sorted(efsa.intensity_loops.items()):
        paired = [(w, run.feed) for w, run in zip(windows, runs) if run.feed is not None]
        if not paired:
            logger.warning("%s: no sensor log to fit against; intensity check disabled", loop_id)
            continue
        try:
            loop.model = fit_runs(paired, loop_id, efsa)
        except DegenerateFitError as e:
            logger.warning("%s; intensity check disabled", e)

    if ngram:
        db = build_ngram_db(traces, ngram)
        labeled = [LabeledTrace(run.records, run.truth) for run in runs if run.truth is not None]
        if labeled:
            found = find_event_ngrams(db, labeled, efsa)
            efsa.baselines["ngram_minimal_n"] = found.minimal_unique_n
        efsa.baselines["ngram"] = db.to_dict()
    if scfd:
        instances = [inst for ws in windows for inst in ws if inst.complete]
        k = scfd if scfd == "auto" else int(scfd)
        efsa.baselines["scfd"] = scfd_fit(instances, k, seed).to_dict()
    return efsa


def coverage_lines(efsa: Efsa) -> List[str]:
    """Per-edge training counts, lowest first, for the train report."""
    counts = efsa.fsa.edge_counts
    lines = []
    for edge in sorted(efsa.fsa.edges, key=lambda e: (counts.get(e, 0), e)):
        tag = " *" if edge in efsa.event_edges else ""
        lines.append(f"{counts.get(edge, 0):6d}  {state_name(edge.src)} --{edge.label}--> {state_name(edge.dst)}{tag}")
    return lines


# ============================================
# MONITOR
# ============================================

def make_verifier(config: VerifierConfig, feed: Optional[SensorFeed] = None) -> EventVerifier:
    if feed is None and config.sensor_log:
        feed = load_sensor_log(config.sensor_log)
    return EventVerifier(config, feed)


def monitor(efsa: Efsa, records: Iterable[TraceRecord], verifier: Optional[EventVerifier] = None,
            settings: Optional[DetectorSettings] = None) -> Tuple[List[AnomalyReport], DetectorSummary]:
    """Run the detector over `records`."""
    detector = Detector(efsa, verifier, settings)
    reports = detector.monitor(records)
    return reports, detector.summary


def baseline_reports(efsa: Efsa, records: Sequence[TraceRecord], verifier: Optional[EventVerifier] = None,
                     fail_open: bool = True, kinds: Sequence[str] = ("ngram", "scfd")) -> List[AnomalyReport]:
    """Reports from the baselines stored in the model."""
    reports: List[AnomalyReport] = []
    if "ngram" in kinds and "ngram" in efsa.baselines:
        db = NgramDb.from_dict(efsa.baselines["ngram"])
        reports.extend(ngram_detect(db, records, verifier, fail_open))
    if "scfd" in kinds and "scfd" in efsa.baselines and efsa.window_header is not None:
        profile = ScfdProfile.from_dict(efsa.baselines["scfd"])
        reports.extend(scfd_detect(profile, records, efsa.window_header))
    return sorted(reports, key=lambda r: r.timestamp)


# ============================================
# SCENARIOS
# ============================================

@dataclass
class ScenarioOutcome:
    name: str
    result: SimulationResult
    efsa: Efsa
    reports: List[AnomalyReport]
    summary: DetectorSummary

    def windows_with(self, kind: AnomalyKind) -> List[int]:
        return sorted({r.window_index for r in self.reports if r.kind == kind and r.window_index is not None})

    def first(self, kind: AnomalyKind) -> Optional[AnomalyReport]:
        return next((r for r in self.reports if r.kind == kind), None)


def train_for_scenario(name: str, seed: int = 0, ngram: Optional[int] = None,
                       scfd: Optional[str] = None) -> Efsa:
    """Simulate the training sweep matching `name` and train on it."""
    training = training_scenario_for(name)
    plant, attack = scenario(training, seed=seed)
    program, analysis = load_analyzed(plant.program, plant.constants)
    result = simulate(plant, attack, program)
    return train(program, [TrainingRun.from_simulation(result, training)], analysis.annotated,
                 ngram=ngram, scfd=scfd, seed=seed)


def evaluate_scenario(name: str, seed: int = 0, cycles: Optional[int] = None, mode: str = "local",
                      settings: Optional[DetectorSettings] = None, efsa: Optional[Efsa] = None) -> ScenarioOutcome:
    """
    Train on the matching sweep, run the scenario and monitor its trace.

    `local` verifies against the plant's ground-truth log; `distributed`
    serves every neighbor feed over TCP and verifies through those servers.
    """
    if efsa is None:
        efsa = train_for_scenario(name, seed)
    plant, attack = scenario(name, seed=seed, cycles=cycles)
    program, _ = load_analyzed(plant.program, plant.constants)
    result = simulate(plant, attack, program)

    with ExitStack() as stack:
        neighbors: List[str] = []
        if mode in ("distributed", "both"):
            for feed in result.neighbor_feeds():
                server, _ = start_server(feed)
                stack.callback(server.server_close)
                stack.callback(server.shutdown)
                neighbors.append(server.address)
        config = VerifierConfig(mode=mode, neighbors=neighbors)
        verifier = EventVerifier(config, result.feed() if mode in ("local", "both") else None)
        stack.callback(verifier.close)
        reports, summary = monitor(efsa, result.records, verifier, settings)

    logger.info("%s: %s", name, dict(summary.reports))
    return ScenarioOutcome(name, result, efsa, reports, summary)
