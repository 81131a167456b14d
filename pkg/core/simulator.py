"""
Plant simulator for Aulos.
Runs a control program cycle by cycle against simulated sensors, producing
the syscall trace, ground-truth sensor logs and per-cycle event outcomes,
optionally under a sensor-corruption attack.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .config import AttackSpec, PlantConfig, SensorProcess
from .event_analysis import EventSpec, analyze_program
from .fsa_model import TraceRecord, write_trace
from .mini_ir import (
    InstrKind, Program, TermKind, build_cfgs, compute_dominance, evaluate_expression,
    find_program_loops, load_program,
)
from .verifier import SensorFeed, SensorReading, write_sensor_log

logger = logging.getLogger(__name__)

PROGRAMS_DIR = Path(__file__).resolve().parent.parent / "programs"


class SimulationError(RuntimeError):
    pass


class ScenarioError(KeyError):
    pass


def resolve_program(ref: str) -> Path:
    """A path to an .ir file, or the name of a bundled program."""
    path = Path(ref)
    if path.suffix == ".ir" or path.exists():
        return path
    return PROGRAMS_DIR / f"{ref}.ir"


# ============================================
# PLANT
# ============================================

class Plant:
    """Sensor processes plus the actuator state that drives them."""

    def __init__(self, config: PlantConfig, attack: Optional[AttackSpec] = None):
        self.config = config
        self.attack = attack
        self.rng = np.random.default_rng(config.seed)
        self.neighbor_rng = np.random.default_rng([config.seed, 1])
        self.attacker_rng = np.random.default_rng([config.seed, 2])
        self.state: Dict[str, float] = {name: p.base for name, p in config.sensors.items()}
        self.actuators: Dict[str, Any] = {}
        self.cycle = -1
        self.true_values: Dict[str, float] = {}
        self.spoofed: Optional[float] = None

    def _truth(self, name: str, process: SensorProcess, cycle: int) -> float:
        if process.kind == "band":
            return float(self.rng.uniform(process.low, process.high))
        if process.kind == "levels":
            return float(process.levels[(cycle // process.repeat) % len(process.levels)])
        if process.kind == "thermal":
            return self.state[name]
        return process.base

    def begin_cycle(self, cycle: int, start: float) -> Tuple[List[SensorReading], Dict[int, List[SensorReading]]]:
        """Draw this cycle's sensor values; returns the ground-truth and neighbor samples."""
        self.cycle = cycle
        truth: List[SensorReading] = []
        neighbors: Dict[int, List[SensorReading]] = {m: [] for m in range(self.config.neighbors)}
        step = self.config.period / self.config.samples_per_cycle
        self.true_values = {}
        for name in sorted(self.config.sensors):
            process = self.config.sensors[name]
            value = self._truth(name, process, cycle)
            for j in range(self.config.samples_per_cycle):
                t = round(start + j * step, 4)
                sample = value + (float(self.rng.normal(0.0, process.sigma)) if process.sigma > 0 else 0.0)
                sample = round(sample, 4)
                if j == 0:
                    self.true_values[name] = sample
                truth.append(SensorReading(name, sample, t))
                for m in neighbors:
                    noise = float(self.neighbor_rng.normal(0.0, self.config.neighbor_sigma))
                    neighbors[m].append(SensorReading(name, round(value + noise, 4), t, f"neighbor{m}"))
        self.spoofed = None
        if self.attack is not None and self.attack.active(cycle):
            if self.attack.value is not None:
                self.spoofed = self.attack.value
            else:
                low, high = self.attack.value_range
                self.spoofed = round(float(self.attacker_rng.uniform(low, high)), 4)
        return truth, neighbors

    def read(self, sensor: str, function: str) -> float:
        if sensor not in self.true_values:
            raise SimulationError(f"program reads sensor '{sensor}' that the plant does not simulate")
        attack = self.attack
        if (self.spoofed is not None and attack.sensor == sensor
                and (attack.function is None or attack.function == function)):
            return self.spoofed
        return self.true_values[sensor]

    def actuate(self, api: str, args: List[Any]) -> None:
        self.actuators[api] = args[0] if len(args) == 1 else tuple(args)

    def end_cycle(self) -> None:
        for name, process in self.config.sensors.items():
            if process.kind != "thermal":
                continue
            on = bool(self.actuators.get(process.actuator)) if process.actuator else False
            target = process.hot if on else process.ambient
            self.state[name] += process.rate * (target - self.state[name])


# ============================================
# INTERPRETER
# ============================================

class _Stop(Exception):
    pass


@dataclass
class SimulationResult:
    program: str
    records: List[TraceRecord]
    readings: List[SensorReading]
    neighbor_readings: Dict[str, List[SensorReading]]
    truth: List[Dict[str, bool]]
    true_values: List[Dict[str, float]]
    attacked_cycles: List[int] = field(default_factory=list)

    @property
    def cycles(self) -> int:
        return len(self.truth)

    def feed(self) -> SensorFeed:
        return SensorFeed().extend(self.readings)

    def neighbor_feeds(self) -> List[SensorFeed]:
        return [SensorFeed(name).extend(readings) for name, readings in sorted(self.neighbor_readings.items())]

    def write(self, out_dir, stem: str = "run") -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "trace": write_trace(self.records, out / f"{stem}.trace"),
            "sensors": write_sensor_log(self.readings, out / f"{stem}.sensors.log"),
        }
        for name, readings in sorted(self.neighbor_readings.items()):
            paths[name] = write_sensor_log(readings, out / f"{stem}.{name}.log")
        truth_path = out / f"{stem}.truth.json"
        with open(truth_path, "w") as f:
            json.dump({"program": self.program, "truth": self.truth, "true_values": self.true_values,
                       "attacked_cycles": self.attacked_cycles}, f, indent=2, sort_keys=True)
        paths["truth"] = truth_path
        return paths


class Simulator:
    def __init__(self, program: Program, plant: PlantConfig, attack: Optional[AttackSpec] = None,
                 events: Optional[List[EventSpec]] = None):
        self.program = program
        self.config = plant
        self.attack = attack
        self.plant = Plant(plant, attack)
        self.events = [e for e in (events if events is not None else analyze_program(program).events)
                       if e.predicate is not None]
        self.functions = {fn.name: fn for fn in program.functions}
        self.constants = program.constant_map()

        cfgs = build_cfgs(program)
        dominance = {name: compute_dominance(cfg) for name, cfg in cfgs.items()}
        top = find_program_loops(program, cfgs, dominance)[program.entry].top_level_loops
        if not top:
            raise SimulationError(f"entry function '{program.entry}' has no scan loop")
        self.scan_header = top[0].header

        self.clock = 0.0
        self.cycle = -1
        self.records: List[TraceRecord] = []
        self.readings: List[SensorReading] = []
        self.neighbors: Dict[str, List[SensorReading]] = {}
        self.truth: List[Dict[str, bool]] = []
        self.true_values: List[Dict[str, float]] = []
        self.attacked: List[int] = []
        self.visits: Dict[Tuple[str, int], int] = {}

    def _next_cycle(self) -> None:
        if self.cycle >= 0:
            self.plant.end_cycle()
        self.cycle += 1
        if self.cycle >= self.config.cycles:
            raise _Stop()
        start = max(self.clock, (self.cycle + 1) * self.config.period)
        self.clock = start
        self.visits.clear()
        truth, neighbors = self.plant.begin_cycle(self.cycle, start)
        self.readings.extend(truth)
        for m, readings in neighbors.items():
            self.neighbors.setdefault(f"neighbor{m}", []).extend(readings)
        values = dict(self.plant.true_values)
        self.true_values.append(values)
        self.truth.append({e.id: e.predicate.evaluate(values[e.predicate.sensor])
                           for e in self.events if e.predicate.sensor in values})
        if self.plant.spoofed is not None:
            self.attacked.append(self.cycle)

    def _eval(self, expr: str, env: Dict[str, Any], where: str) -> Any:
        try:
            return evaluate_expression(expr, {**self.constants, **env})
        except (NameError, ValueError, ZeroDivisionError, TypeError) as e:
            raise SimulationError(f"{where}: cannot evaluate '{expr}': {e}")

    def _call(self, name: str, args: List[Any], depth: int) -> Any:
        fn = self.functions[name]
        env: Dict[str, Any] = dict(zip(fn.params, args))
        blocks = fn.block_map()
        block_id = fn.entry
        while True:
            if depth == 0 and name == self.program.entry and block_id == self.scan_header:
                self._next_cycle()
            key = (name, block_id)
            self.visits[key] = self.visits.get(key, 0) + 1
            if self.visits[key] > self.config.max_loop_iterations:
                raise SimulationError(f"loop at {name}:{block_id} exceeded {self.config.max_loop_iterations} "
                                      f"iterations in cycle {self.cycle}")
            block = blocks[block_id]
            where = f"{name}:{block_id}"
            for ins in block.instrs:
                if ins.kind == InstrKind.READ_SENSOR:
                    env[ins.dst] = self.plant.read(self.program.sensor_of(ins.api), name)
                elif ins.kind == InstrKind.ASSIGN:
                    env[ins.dst] = self._eval(ins.expr, env, where)
                elif ins.kind == InstrKind.CALL:
                    value = self._call(ins.fn, [self._eval(a, env, where) for a in ins.args], depth + 1)
                    if ins.dst:
                        env[ins.dst] = value
                elif ins.kind == InstrKind.ACTUATE:
                    self.plant.actuate(ins.api, [self._eval(a, env, where) for a in ins.args])
                elif ins.kind == InstrKind.SYSCALL:
                    self.records.append(TraceRecord(round(self.clock, 6), ins.pc, ins.name))
                    self.clock += self.config.syscall_latency
            term = block.terminator
            if term.kind == TermKind.RET:
                return env.get(term.value) if term.value else None
            if term.kind == TermKind.JMP:
                block_id = term.target
            else:
                block_id = term.true_target if env.get(term.cond) else term.false_target

    def run(self) -> SimulationResult:
        try:
            self._call(self.program.entry, [], 0)
        except _Stop:
            pass
        if self.cycle < 0:
            raise SimulationError(f"{self.program.name} never reached its scan loop")
        logger.info("%s: %d cycles, %d syscalls, %d attacked cycles",
                    self.program.name, len(self.truth), len(self.records), len(self.attacked))
        return SimulationResult(self.program.name, self.records, self.readings, self.neighbors,
                                self.truth, self.true_values, self.attacked)


def simulate(plant: PlantConfig, attack: Optional[AttackSpec] = None,
             program: Optional[Program] = None) -> SimulationResult:
    """Run `plant.cycles` scan cycles of the plant's program."""
    if program is None:
        program = load_program(resolve_program(plant.program))
    if plant.constants:
        program = program.with_constants(plant.constants)
    if attack is not None and attack.sensor not in plant.sensors:
        raise SimulationError(f"attack targets unknown sensor '{attack.sensor}'")
    return Simulator(program, plant, attack).run()


def neighbor_feeds(result: SimulationResult) -> List[SensorFeed]:
    return result.neighbor_feeds()


# ============================================
# SCENARIOS
# ============================================

@dataclass
class Scenario:
    """A canned plant configuration with an optional attack."""
    name: str
    description: str
    plant: PlantConfig
    attack: Optional[AttackSpec] = None
    training: bool = False


HUMIDITY_BAND = SensorProcess(kind="band", low=34.0, high=38.0, sigma=0.05)
SOLARD_TEMPERATURE = SensorProcess(kind="thermal", base=45.0, rate=0.03, hot=100.0, ambient=25.0,
                                   actuator="setHeater")

SCENARIOS: Dict[str, Scenario] = {
    "syringe_normal": Scenario(
        name="syringe_normal",
        description="SyringePump, threshold 40 rH, humidity fluctuating in 34-38 rH",
        plant=PlantConfig(program="syringe_pump", sensors={"humidity": HUMIDITY_BAND}, cycles=50),
    ),
    "syringe_train": Scenario(
        name="syringe_train",
        description="SyringePump training sweep over pull, idle, zero-trip and push humidity levels",
        plant=PlantConfig(
            program="syringe_pump",
            sensors={"humidity": SensorProcess(kind="levels",
                                               levels=[20, 30, 36, 40.5, 41, 42, 43, 44, 45, 46])},
            cycles=40,
        ),
        training=True,
    ),
    "syringe_branch_attack": Scenario(
        name="syringe_branch_attack",
        description="humidity read corrupted to 48.56 rH in cycles 10-19 to force the push branch",
        plant=PlantConfig(program="syringe_pump", sensors={"humidity": HUMIDITY_BAND}, cycles=50),
        attack=AttackSpec(kind="branch_spoof", sensor="humidity", value=48.56, start_cycle=10, end_cycle=19),
    ),
    "syringe_intensity_train": Scenario(
        name="syringe_intensity_train",
        description="SyringePump with threshold 30 rH, sweeping humidity 31-38 rH for the intensity fit",
        plant=PlantConfig(
            program="syringe_pump",
            constants={"HUMIDITY_THRESHOLD": 30},
            sensors={"humidity": SensorProcess(kind="levels",
                                               levels=[20, 27, 30.5, 31, 32, 33, 34, 35, 36, 37, 38])},
            cycles=44,
        ),
        training=True,
    ),
    "syringe_intensity_normal": Scenario(
        name="syringe_intensity_normal",
        description="SyringePump with threshold 30 rH, humidity in 34-38 rH",
        plant=PlantConfig(program="syringe_pump", constants={"HUMIDITY_THRESHOLD": 30},
                          sensors={"humidity": HUMIDITY_BAND}, cycles=50),
    ),
    "syringe_intensity_low": Scenario(
        name="syringe_intensity_low",
        description="push_syringe's humidity read corrupted to 20 rH in cycles 10-19",
        plant=PlantConfig(program="syringe_pump", constants={"HUMIDITY_THRESHOLD": 30},
                          sensors={"humidity": HUMIDITY_BAND}, cycles=50),
        attack=AttackSpec(kind="intensity_corrupt", sensor="humidity", value=20, start_cycle=10, end_cycle=19,
                          function="push_syringe"),
    ),
    "syringe_intensity_high": Scenario(
        name="syringe_intensity_high",
        description="push_syringe's humidity read corrupted to 48 rH in cycles 10-19",
        plant=PlantConfig(program="syringe_pump", constants={"HUMIDITY_THRESHOLD": 30},
                          sensors={"humidity": HUMIDITY_BAND}, cycles=50),
        attack=AttackSpec(kind="intensity_corrupt", sensor="humidity", value=48, start_cycle=10, end_cycle=19,
                          function="push_syringe"),
    ),
    "solard_train": Scenario(
        name="solard_train",
        description="Solard heater control through several heat/cool periods",
        plant=PlantConfig(program="solard", sensors={"temperature": SOLARD_TEMPERATURE}, cycles=80),
        training=True,
    ),
    "solard_normal": Scenario(
        name="solard_normal",
        description="Solard, heater on below 50 C, off above 60 C",
        plant=PlantConfig(program="solard", sensors={"temperature": SOLARD_TEMPERATURE}, cycles=60),
    ),
    "solard_branch_attack": Scenario(
        name="solard_branch_attack",
        description="CriticalTempsFound's temperature read corrupted into 40-45 C, keeping the heater on",
        plant=PlantConfig(program="solard", sensors={"temperature": SOLARD_TEMPERATURE}, cycles=60),
        attack=AttackSpec(kind="branch_spoof", sensor="temperature", value_range=(40.0, 45.0),
                          function="CriticalTempsFound"),
    ),
}


def scenario(name: str, seed: Optional[int] = None,
             cycles: Optional[int] = None) -> Tuple[PlantConfig, Optional[AttackSpec]]:
    if name not in SCENARIOS:
        raise ScenarioError(f"unknown scenario '{name}' (known: {', '.join(sorted(SCENARIOS))})")
    entry = SCENARIOS[name]
    updates: Dict[str, Any] = {}
    if seed is not None:
        updates["seed"] = seed
    if cycles is not None:
        updates["cycles"] = cycles
    plant = entry.plant.model_copy(update=updates, deep=True)
    attack = entry.attack.model_copy(deep=True) if entry.attack else None
    return plant, attack


def training_scenario_for(name: str) -> str:
    """The training sweep matching a monitoring scenario's program and constants."""
    plant, _ = scenario(name)
    for candidate in SCENARIOS.values():
        if (candidate.training and candidate.plant.program == plant.program
                and candidate.plant.constants == plant.constants):
            return candidate.name
    raise ScenarioError(f"no training scenario for '{name}'")
