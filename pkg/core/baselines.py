"""
Baseline models for Aulos.
Event-aware n-gram membership over syscall names and system-call frequency
distribution (SCFD) clustering of scan cycles.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from .detector import AnomalyKind, AnomalyReport
from .event_analysis import CompositeEvent, EventSpec
from .fsa_model import START, BehaviorInstance, Efsa, TraceRecord, partition_windows, transition_edge
from .verifier import EventVerifier, Verdict, VerifierError

logger = logging.getLogger(__name__)

Gram = Tuple[str, ...]

SCFD_THRESHOLD_MARGIN = 1.1
SCFD_MAX_AUTO_K = 8


def sliding_grams(names: Sequence[str], n: int) -> Iterable[Tuple[int, Gram]]:
    """(start index, gram) for every length-n window."""
    window: deque = deque(maxlen=n)
    for i, name in enumerate(names):
        window.append(name)
        if len(window) == n:
            yield i - n + 1, tuple(window)


def _names(trace: Sequence[TraceRecord]) -> List[str]:
    return [rec.syscall for rec in trace]


# ============================================
# N-GRAMS
# ============================================

@dataclass
class NgramDb:
    n: int
    grams: Set[Gram] = field(default_factory=set)
    event_grams: Dict[str, Set[Gram]] = field(default_factory=dict)
    ambiguous: Dict[str, Set[Gram]] = field(default_factory=dict)
    events: Tuple[EventSpec, ...] = ()

    def __contains__(self, gram: Gram) -> bool:
        return gram in self.grams

    def composite_for(self, gram: Gram) -> Optional[str]:
        for composite, grams in sorted(self.event_grams.items()):
            if gram in grams:
                return composite
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "grams": sorted(list(g) for g in self.grams),
            "event_grams": {c: sorted(list(g) for g in gs) for c, gs in sorted(self.event_grams.items())},
            "ambiguous": {c: sorted(list(g) for g in gs) for c, gs in sorted(self.ambiguous.items())},
            "events": [e.to_dict() for e in self.events],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NgramDb":
        return cls(
            n=int(data["n"]),
            grams={tuple(g) for g in data["grams"]},
            event_grams={c: {tuple(g) for g in gs} for c, gs in data.get("event_grams", {}).items()},
            ambiguous={c: {tuple(g) for g in gs} for c, gs in data.get("ambiguous", {}).items()},
            events=tuple(EventSpec.from_dict(e) for e in data.get("events", [])),
        )


def build_ngram_db(traces: Iterable[Sequence[TraceRecord]], n: int) -> NgramDb:
    """Every length-n window of syscall names seen in training."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    db = NgramDb(n)
    used = 0
    for i, trace in enumerate(traces):
        if len(trace) < n:
            logger.warning("trace %d has %d records, shorter than n=%d; skipped", i, len(trace), n)
            continue
        used += 1
        db.grams.update(g for _, g in sliding_grams(_names(trace), n))
    if not used:
        raise ValueError("no training trace is long enough")
    return db


@dataclass
class LabeledTrace:
    """Training trace plus the ground-truth event outcome of every scan cycle."""
    records: List[TraceRecord]
    truth: List[Dict[str, bool]]

    def holds(self, composite: CompositeEvent, window: int) -> bool:
        if window < 0 or window >= len(self.truth):
            return False
        outcome = self.truth[window]
        return all(outcome.get(l.event_id) == l.positive for l in composite.literals)


@dataclass
class EventNgrams:
    event_grams: Dict[str, Set[Gram]]
    ambiguous: Dict[str, Set[Gram]]
    minimal_unique_n: Dict[str, Optional[int]]

    @property
    def minimal_n(self) -> Optional[int]:
        found = [n for n in self.minimal_unique_n.values() if n is not None]
        return min(found) if found else None


def _window_index(trace: Sequence[TraceRecord], header: Optional[int]) -> List[int]:
    index, current = [], -1
    for rec in trace:
        if rec.pc == header:
            current += 1
        index.append(current)
    return index


def _checkpoints(trace: Sequence[TraceRecord], efsa: Efsa) -> Dict[int, Tuple[CompositeEvent, ...]]:
    """Record index -> constraint of the event-dependent transition taken into it."""
    found = {}
    current, last = START, None
    for i, rec in enumerate(trace):
        edge = transition_edge(current, last, rec)
        if edge in efsa.event_edges:
            found[i] = efsa.event_edges[edge]
        current, last = rec.pc, rec.syscall
    return found


def _classify_grams(db_n: int, traces: Sequence[LabeledTrace], efsa: Efsa) -> Tuple[Dict[str, Set[Gram]], Dict[str, Set[Gram]]]:
    candidates: Dict[str, Set[Gram]] = {}
    occurrences: Dict[Gram, List[Tuple[int, int]]] = {}
    for t, trace in enumerate(traces):
        windows = _window_index(trace.records, efsa.window_header)
        checkpoints = _checkpoints(trace.records, efsa)
        names = _names(trace.records)
        for start, gram in sliding_grams(names, db_n):
            occurrences.setdefault(gram, []).append((t, windows[start]))
            for alternative in checkpoints.get(start, ()):
                if trace.holds(alternative, windows[start]):
                    candidates.setdefault(str(alternative), set()).add(gram)

    unique: Dict[str, Set[Gram]] = {}
    ambiguous: Dict[str, Set[Gram]] = {}
    for key, grams in candidates.items():
        composite = CompositeEvent.parse(key)
        for gram in grams:
            inside = all(traces[t].holds(composite, w) for t, w in occurrences[gram])
            (unique if inside else ambiguous).setdefault(key, set()).add(gram)
    return unique, ambiguous


def find_event_ngrams(db: NgramDb, traces: Sequence[LabeledTrace], efsa: Efsa, max_n: int = 10) -> EventNgrams:
    """
    Mark the grams that start at an event checkpoint.

    A gram is kept as event-dependent only if every training occurrence falls
    in a scan cycle where the composite event truly held; the rest are
    ambiguous. Also reports, per composite, the smallest n at which such a
    unique gram exists (None if there is none up to `max_n`).
    """
    unique, ambiguous = _classify_grams(db.n, traces, efsa)
    db.event_grams = unique
    db.ambiguous = ambiguous
    db.events = tuple(efsa.events)

    composites = sorted({str(c) for alts in efsa.event_edges.values() for c in alts})
    minimal: Dict[str, Optional[int]] = {c: None for c in composites}
    for n in range(2, max_n + 1):
        pending = [c for c in composites if minimal[c] is None]
        if not pending:
            break
        found = unique if n == db.n else _classify_grams(n, traces, efsa)[0]
        for c in pending:
            if found.get(c):
                minimal[c] = n
    return EventNgrams(unique, ambiguous, minimal)


def _verify_composite(composite: CompositeEvent, events: Dict[str, EventSpec], verifier: EventVerifier,
                      at: float) -> Verdict:
    outcome = Verdict.HOLDS
    for literal in composite.literals:
        event = events.get(literal.event_id)
        try:
            verdict = verifier.verify(event, literal.positive, at) if event else Verdict.UNKNOWN
        except VerifierError:
            verdict = Verdict.UNKNOWN
        if verdict == Verdict.CONTRADICTED:
            return verdict
        if verdict == Verdict.UNKNOWN:
            outcome = Verdict.UNKNOWN
    return outcome


def ngram_detect(db: NgramDb, trace: Sequence[TraceRecord], verifier: Optional[EventVerifier] = None,
                 fail_open: bool = True) -> List[AnomalyReport]:
    """Membership check of every gram, plus event checks at event grams (once per contiguous run)."""
    reports = []
    events = {e.id: e for e in db.events}
    previous: Optional[str] = None
    for start, gram in sliding_grams(_names(trace), db.n):
        end = trace[start + db.n - 1]
        if gram not in db.grams:
            reports.append(AnomalyReport(
                AnomalyKind.UNKNOWN_NGRAM, end.timestamp, end.pc,
                f"unseen {db.n}-gram ({', '.join(gram)})", {"gram": list(gram)}, end,
            ))
        composite = db.composite_for(gram)
        if composite is None or verifier is None:
            previous = composite
            continue
        if composite == previous:
            continue
        previous = composite
        first = trace[start]
        verdict = _verify_composite(CompositeEvent.parse(composite), events, verifier, first.timestamp)
        if verdict == Verdict.CONTRADICTED:
            reports.append(AnomalyReport(
                AnomalyKind.EVENT_MISMATCH, first.timestamp, first.pc,
                f"event gram ({', '.join(gram)}) claims [{composite}]", {"gram": list(gram), "constraint": composite},
                first,
            ))
        elif verdict == Verdict.UNKNOWN:
            reports.append(AnomalyReport(
                AnomalyKind.VERIFIER_UNAVAILABLE, first.timestamp, first.pc,
                f"cannot verify [{composite}]", {"gram": list(gram), "constraint": composite}, first,
                counted=not fail_open,
            ))
    return reports


# ============================================
# SCFD
# ============================================

@dataclass
class ScfdProfile:
    alphabet: List[str]
    centroids: np.ndarray
    threshold: float

    @property
    def k(self) -> int:
        return len(self.centroids)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alphabet": self.alphabet,
            "centroids": [[round(float(x), 9) for x in row] for row in self.centroids],
            "threshold": round(float(self.threshold), 9),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScfdProfile":
        return cls(list(data["alphabet"]), np.asarray(data["centroids"], dtype=float), float(data["threshold"]))


@dataclass(frozen=True)
class ScfdVerdict:
    anomalous: bool
    distance: float
    cluster: int


def frequency_vector(records: Iterable[TraceRecord], alphabet: Sequence[str]) -> Tuple[np.ndarray, int]:
    """Per-syscall counts over `alphabet`, plus the count of syscalls outside it."""
    position = {name: i for i, name in enumerate(alphabet)}
    vector = np.zeros(len(alphabet))
    unknown = 0
    for rec in records:
        i = position.get(rec.syscall)
        if i is None:
            unknown += 1
        else:
            vector[i] += 1
    return vector, unknown


def _choose_k(X: np.ndarray, seed: int) -> int:
    distinct = len(np.unique(X, axis=0))
    if distinct < 2:
        return 1
    best_k, best_score = 1, -1.0
    for k in range(2, min(SCFD_MAX_AUTO_K, distinct, len(X) - 1) + 1):
        labels = KMeans(n_clusters=k, random_state=seed, n_init=10).fit_predict(X)
        score = silhouette_score(X, labels)
        if score > best_score:
            best_k, best_score = k, score
    return best_k


def scfd_fit(instances: Sequence[BehaviorInstance], k: Union[int, str] = "auto", seed: int = 0) -> ScfdProfile:
    """Cluster per-window frequency vectors; threshold is the widest training distance plus margin."""
    if not instances:
        raise ValueError("no behavior instances to profile")
    alphabet = sorted({rec.syscall for inst in instances for rec in inst.records})
    X = np.vstack([frequency_vector(inst.records, alphabet)[0] for inst in instances])
    if k == "auto":
        k = _choose_k(X, seed)
    k = int(k)
    if k < 1 or k > len(instances):
        raise ValueError(f"k={k} needs between 1 and {len(instances)} clusters")
    model = KMeans(n_clusters=k, random_state=seed, n_init=10).fit(X)
    distances = cdist(X, model.cluster_centers_).min(axis=1)
    threshold = float(distances.max()) * SCFD_THRESHOLD_MARGIN
    logger.info("SCFD: %d windows, %d syscalls, k=%d, threshold %.3f", len(X), len(alphabet), k, threshold)
    return ScfdProfile(alphabet, model.cluster_centers_, threshold)


def scfd_classify(profile: ScfdProfile, instance: BehaviorInstance) -> ScfdVerdict:
    vector, unknown = frequency_vector(instance.records, profile.alphabet)
    distances = cdist(vector[None, :], profile.centroids)[0]
    cluster = int(np.argmin(distances))
    distance = float(np.hypot(distances[cluster], unknown))
    return ScfdVerdict(distance > profile.threshold, distance, cluster)


def scfd_detect(profile: ScfdProfile, trace: Sequence[TraceRecord], window_header: int) -> List[AnomalyReport]:
    reports = []
    for instance in partition_windows(list(trace), window_header):
        if not instance.complete:
            continue
        verdict = scfd_classify(profile, instance)
        if verdict.anomalous:
            first = instance.records[0]
            reports.append(AnomalyReport(
                AnomalyKind.FREQUENCY_OUTLIER, first.timestamp, first.pc,
                f"window {instance.window_index} distance {verdict.distance:.2f} > {profile.threshold:.2f}",
                {"distance": verdict.distance, "threshold": profile.threshold, "cluster": verdict.cluster},
                first, instance.window_index,
            ))
    return reports
