"""
Intensity model for Aulos.
Counts control-intensity loop iterations per scan cycle and fits the linear
relation between a sensor value and the iteration count.
"""

import bisect
import logging
from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

if TYPE_CHECKING:
    from .fsa_model import BehaviorInstance, Efsa

logger = logging.getLogger(__name__)

# Relative slope magnitude below which a fit is treated as flat
_FLAT_SLOPE = 1e-9

# A SensorFeed, or plain (timestamp, value) pairs for one sensor
SensorSeries = Any


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class IterationCount:
    iterations: int
    partial: bool
    visited: bool


@dataclass
class IntensityModel:
    """iterations ~= slope * sensor + intercept for one loop."""
    loop_id: str
    sensor: str
    per_iteration_syscall_count: int
    slope: float
    intercept: float
    residual_sd: float = 0.0
    baseline_syscalls_per_window: Optional[int] = None
    samples: int = 0

    def predict(self, sensor_value: float) -> float:
        return self.slope * sensor_value + self.intercept

    def derive_sensor(self, iterations: float) -> float:
        """Sensor value implied by an observed iteration count."""
        return (iterations - self.intercept) / self.slope

    def to_dict(self) -> Dict[str, Any]:
        return {
            "loop_id": self.loop_id,
            "sensor": self.sensor,
            "per_iteration_syscall_count": self.per_iteration_syscall_count,
            "slope": self.slope,
            "intercept": self.intercept,
            "residual_sd": self.residual_sd,
            "baseline_syscalls_per_window": self.baseline_syscalls_per_window,
            "samples": self.samples,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IntensityModel":
        return cls(
            loop_id=data["loop_id"],
            sensor=data["sensor"],
            per_iteration_syscall_count=int(data["per_iteration_syscall_count"]),
            slope=float(data["slope"]),
            intercept=float(data["intercept"]),
            residual_sd=float(data.get("residual_sd", 0.0)),
            baseline_syscalls_per_window=data.get("baseline_syscalls_per_window"),
            samples=int(data.get("samples", 0)),
        )


def count_body_iterations(records: Iterable, head_pc: int, body_pcs: Iterable[int],
                          per_iteration: int) -> IterationCount:
    """
    Iterations among `records`: one per visit of the loop's head syscall.

    The count is partial when the body syscalls seen do not add up to whole
    passes around the loop.
    """
    body = set(body_pcs)
    heads = visited = 0
    for rec in records:
        if rec.pc in body:
            visited += 1
            if rec.pc == head_pc:
                heads += 1
    return IterationCount(heads, visited != heads * per_iteration, visited > 0)


def count_window_iterations(instance: "BehaviorInstance", efsa: "Efsa", loop_id: str) -> IterationCount:
    loop = efsa.intensity_loops[loop_id]
    return count_body_iterations(instance.records, loop.head_pc, loop.body_pcs, loop.per_iteration_syscall_count)


def count_iterations(instance: "BehaviorInstance", efsa: "Efsa", loop_id: str) -> int:
    return count_window_iterations(instance, efsa, loop_id).iterations


def reading_at(feed: SensorSeries, timestamp: float, sensor: Optional[str] = None) -> Optional[float]:
    """Latest reading taken at or before `timestamp`, from a SensorFeed or (t, value) pairs."""
    if hasattr(feed, "latest"):
        reading = feed.latest(sensor, timestamp)
        return reading.value if reading else None
    times = [t for t, _ in feed]
    i = bisect.bisect_right(times, timestamp)
    return feed[i - 1][1] if i else None


def fit_samples(xs: Sequence[float], ys: Sequence[float], loop_id: str = "", sensor: str = "",
                per_iteration: int = 1) -> IntensityModel:
    """Least-squares fit of iteration counts against sensor values."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if len(x) < 2:
        raise DegenerateFitError(f"{loop_id}: need at least two samples, got {len(x)}")
    if np.allclose(x, x[0]):
        raise DegenerateFitError(f"{loop_id}: all sensor values are identical ({x[0]:g})")

    fit = stats.linregress(x, y)
    scale = max(1.0, float(np.abs(y).max()))
    if abs(fit.slope) <= _FLAT_SLOPE * scale:
        raise DegenerateFitError(f"{loop_id}: iteration count does not depend on {sensor or 'the sensor'}")

    residuals = y - (fit.slope * x + fit.intercept)
    residual_sd = float(np.std(residuals, ddof=2)) if len(x) > 2 else 0.0
    return IntensityModel(
        loop_id=loop_id,
        sensor=sensor,
        per_iteration_syscall_count=per_iteration,
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        residual_sd=residual_sd,
        samples=len(x),
    )


def collect_samples(instances: Iterable["BehaviorInstance"], feed: SensorSeries, efsa: "Efsa",
                    loop_id: str) -> Tuple[List[float], List[int], List[int]]:
    """(sensor values, iteration counts, baseline lengths) usable for fitting."""
    xs, ys, baselines = [], [], []
    loop = efsa.intensity_loops[loop_id]
    for instance in instances:
        if not instance.complete:
            continue
        count = count_window_iterations(instance, efsa, loop_id)
        baselines.append(len(instance) - count.iterations * loop.per_iteration_syscall_count)
        if count.partial:
            logger.debug("%s: window %d ends mid-iteration; skipped", loop_id, instance.window_index)
            continue
        if count.iterations == 0:
            continue
        value = reading_at(feed, instance.start, loop.sensor)
        if value is None:
            continue
        xs.append(value)
        ys.append(count.iterations)
    return xs, ys, baselines


def fit_runs(runs: Iterable[Tuple[Iterable["BehaviorInstance"], SensorSeries]], loop_id: str,
             efsa: "Efsa") -> IntensityModel:
    """Fit one loop over several training runs, each with its own sensor log."""
    loop = efsa.intensity_loops[loop_id]
    xs, ys, baselines = [], [], []
    for instances, feed in runs:
        x, y, b = collect_samples(instances, feed, efsa, loop_id)
        xs.extend(x)
        ys.extend(y)
        baselines.extend(b)
    model = fit_samples(xs, ys, loop_id, loop.sensor, loop.per_iteration_syscall_count)
    if baselines:
        counts = Counter(baselines)
        top = max(counts.values())
        model.baseline_syscalls_per_window = min(b for b, c in counts.items() if c == top)
    logger.info("%s: iterations = %.4f * %s %+.4f (n=%d, sd=%.3f)",
                loop_id, model.slope, loop.sensor, model.intercept, model.samples, model.residual_sd)
    return model


def fit(instances: Iterable["BehaviorInstance"], feed: SensorSeries, loop_id: str, efsa: "Efsa") -> IntensityModel:
    """
    Fit the intensity model of one loop from training windows.

    Each complete window is paired with the sensor reading in force when it
    started. Windows where the loop never ran are left out, since the count
    saturates at zero below the threshold.
    """
    return fit_runs([(instances, feed)], loop_id, efsa)
