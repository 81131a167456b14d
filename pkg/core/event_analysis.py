"""
Event analysis for Aulos.
Identifies binary and control-intensity events in a control program and
computes, for every event-triggered block, the composite event it depends on.
"""

import ast
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

import networkx as nx

from .mini_ir import (
    PARAM_BLOCK, Cfg, Dominance, InstrKind, Instruction, LoopInfo, Pdg, Program, Site, TermKind,
    build_cfgs, build_pdg, compute_dominance, evaluate_expression, expression_names,
    find_program_loops, parse_expression, site_item,
)

logger = logging.getLogger(__name__)

ANNOTATION_FORMAT = "aulos-annotations"
ANNOTATION_VERSION = 1

BlockRef = Tuple[str, int]

_NEGATE = {"<": ">=", "<=": ">", ">": "<=", ">=": "<"}
_MIRROR = {"<": ">", "<=": ">=", ">": "<", ">=": "<="}
_AST_COMPARATORS = {ast.Lt: "<", ast.LtE: "<=", ast.Gt: ">", ast.GtE: ">="}

# Bound on def-chain hops while extracting a threshold predicate
_MAX_CHAIN = 16


class AnalysisError(ValueError):
    pass


class EventKind(Enum):
    BINARY = "binary"
    CONTROL_INTENSITY = "control_intensity"


@dataclass(frozen=True)
class Predicate:
    """Threshold test `sensor <comparator> threshold`."""
    sensor: str
    comparator: str
    threshold: float

    def evaluate(self, value: float) -> bool:
        if self.comparator == "<":
            return value < self.threshold
        if self.comparator == "<=":
            return value <= self.threshold
        if self.comparator == ">":
            return value > self.threshold
        return value >= self.threshold

    def negated(self) -> "Predicate":
        return Predicate(self.sensor, _NEGATE[self.comparator], self.threshold)

    def __str__(self) -> str:
        return f"{self.sensor} {self.comparator} {self.threshold:g}"

    def to_dict(self) -> Dict[str, Any]:
        return {"sensor": self.sensor, "comparator": self.comparator, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Predicate":
        return cls(data["sensor"], data["comparator"], float(data["threshold"]))


@dataclass(frozen=True)
class EventSpec:
    id: str
    kind: EventKind
    function: str
    block: int
    line: int
    sensor_apis: Tuple[str, ...]
    sensors: Tuple[str, ...]
    actuation_apis: Tuple[str, ...]
    action_labels: Tuple[str, ...] = ()
    loop_index: Optional[int] = None
    predicate: Optional[Predicate] = None

    @property
    def anchor(self) -> BlockRef:
        return (self.function, self.block)

    @property
    def number(self) -> int:
        return int(self.id[1:])

    @property
    def loop_id(self) -> Optional[str]:
        if self.kind != EventKind.CONTROL_INTENSITY:
            return None
        return f"{self.function}:{self.block}"

    @property
    def implicit_label(self) -> Optional[str]:
        """Branch side without a control action, if any."""
        missing = [l for l in ("true", "false") if l not in self.action_labels]
        return missing[0] if len(missing) == 1 else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "function": self.function,
            "block": self.block,
            "line": self.line,
            "sensor_apis": list(self.sensor_apis),
            "sensors": list(self.sensors),
            "actuation_apis": list(self.actuation_apis),
            "action_labels": list(self.action_labels),
            "loop_index": self.loop_index,
            "predicate": self.predicate.to_dict() if self.predicate else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EventSpec":
        return cls(
            id=data["id"],
            kind=EventKind(data["kind"]),
            function=data["function"],
            block=int(data["block"]),
            line=int(data.get("line", 0)),
            sensor_apis=tuple(data.get("sensor_apis", [])),
            sensors=tuple(data.get("sensors", [])),
            actuation_apis=tuple(data.get("actuation_apis", [])),
            action_labels=tuple(data.get("action_labels", [])),
            loop_index=data.get("loop_index"),
            predicate=Predicate.from_dict(data["predicate"]) if data.get("predicate") else None,
        )


@dataclass(frozen=True)
class EventLiteral:
    event_id: str
    positive: bool = True

    @property
    def sort_key(self) -> Tuple[int, bool]:
        return (int(self.event_id[1:]), not self.positive)

    def negated(self) -> "EventLiteral":
        return EventLiteral(self.event_id, not self.positive)

    def __str__(self) -> str:
        return self.event_id if self.positive else f"!{self.event_id}"

    @classmethod
    def parse(cls, text: str) -> "EventLiteral":
        text = text.strip()
        if text.startswith("!"):
            return cls(text[1:], False)
        return cls(text, True)


@dataclass(frozen=True)
class CompositeEvent:
    """Conjunction of event literals; the empty conjunction is unconditional."""
    literals: Tuple[EventLiteral, ...] = ()

    @classmethod
    def of(cls, literals: Iterable[EventLiteral]) -> "CompositeEvent":
        ordered = sorted(set(literals), key=lambda l: l.sort_key)
        ids = [l.event_id for l in ordered]
        if len(ids) != len(set(ids)):
            raise AnalysisError(f"event repeated in conjunction: {[str(l) for l in ordered]}")
        return cls(tuple(ordered))

    @classmethod
    def parse(cls, text: str) -> "CompositeEvent":
        text = text.strip()
        if text in ("", "true"):
            return cls(())
        return cls.of(EventLiteral.parse(part) for part in text.split("&"))

    @property
    def unconditional(self) -> bool:
        return not self.literals

    def __str__(self) -> str:
        return " & ".join(str(l) for l in self.literals) if self.literals else "true"

    def to_list(self) -> List[str]:
        return [str(l) for l in self.literals]


def format_alternatives(alternatives: Tuple[CompositeEvent, ...]) -> str:
    return " | ".join(str(c) for c in alternatives)


@dataclass
class EventAnnotatedCfg:
    """Events plus the composite event each event-triggered block depends on."""
    program: str
    events: Tuple[EventSpec, ...]
    block_annotations: Dict[BlockRef, Tuple[CompositeEvent, ...]] = field(default_factory=dict)
    loop_annotations: Dict[str, EventSpec] = field(default_factory=dict)
    cfgs: Optional[Dict[str, Cfg]] = None

    def event(self, event_id: str) -> EventSpec:
        for event in self.events:
            if event.id == event_id:
                return event
        raise KeyError(event_id)

    @property
    def binary_events(self) -> List[EventSpec]:
        return [e for e in self.events if e.kind == EventKind.BINARY]

    @property
    def intensity_events(self) -> List[EventSpec]:
        return [e for e in self.events if e.kind == EventKind.CONTROL_INTENSITY]

    @property
    def disjunctive_blocks(self) -> List[BlockRef]:
        return [b for b, alts in sorted(self.block_annotations.items()) if len(alts) > 1]

    def composites(self) -> List[CompositeEvent]:
        seen: Dict[str, CompositeEvent] = {}
        for alts in self.block_annotations.values():
            for c in alts:
                seen.setdefault(str(c), c)
        return [seen[k] for k in sorted(seen)]


# ============================================
# SLICES AND ARMS
# ============================================

def _actuation_closure(program: Program) -> Dict[str, FrozenSet[str]]:
    """Actuation APIs each function may issue, callees included."""
    direct: Dict[str, Set[str]] = {}
    calls = nx.DiGraph()
    for fn in program.functions:
        calls.add_node(fn.name)
        apis = direct.setdefault(fn.name, set())
        for block in fn.blocks:
            for instr in block.instrs:
                if instr.kind == InstrKind.ACTUATE:
                    apis.add(instr.api)
                elif instr.kind == InstrKind.CALL:
                    calls.add_edge(fn.name, instr.fn)
    closure = {}
    for name in calls:
        apis = set(direct[name])
        for callee in nx.descendants(calls, name):
            apis |= direct[callee]
        closure[name] = frozenset(apis)
    return closure


def _block_actuations(program: Program, ref: BlockRef, closure: Dict[str, FrozenSet[str]]) -> Set[str]:
    found: Set[str] = set()
    for instr in program.function(ref[0]).block(ref[1]).instrs:
        if instr.kind == InstrKind.ACTUATE:
            found.add(instr.api)
        elif instr.kind == InstrKind.CALL:
            found |= closure[instr.fn]
    return found


def _slice_sensor_apis(program: Program, pdg: Pdg, site: Site, sensor_apis: FrozenSet[str]) -> Set[str]:
    apis = set()
    for src in pdg.backward_slice(site):
        item = site_item(program, src)
        if isinstance(item, Instruction) and item.kind == InstrKind.READ_SENSOR and item.api in sensor_apis:
            apis.add(item.api)
    return apis


def _arm_actuations(program: Program, pdg: Pdg, ref: BlockRef, label: str,
                    closure: Dict[str, FrozenSet[str]], actuation_apis: FrozenSet[str]) -> Set[str]:
    apis: Set[str] = set()
    for dependent in pdg.control_dependents(ref, label):
        apis |= _block_actuations(program, dependent, closure)
    return apis & actuation_apis


def _branch_site(program: Program, fn_name: str, block_id: int) -> Site:
    block = program.function(fn_name).block(block_id)
    return Site(fn_name, block_id, len(block.instrs))


# ============================================
# EVENT IDENTIFICATION
# ============================================

def identify_control_intensity_events(
    program: Program,
    pdg: Pdg,
    loops: Dict[str, LoopInfo],
    sensor_apis: Optional[Iterable[str]] = None,
    actuation_apis: Optional[Iterable[str]] = None,
) -> List[EventSpec]:
    """Loops whose condition reads a sensor and whose body drives an actuator."""
    sensor_apis = frozenset(sensor_apis if sensor_apis is not None else program.sensor_apis)
    actuation_apis = frozenset(actuation_apis if actuation_apis is not None else program.actuation_apis)
    closure = _actuation_closure(program)

    found = []
    for fn in program.functions:
        for index, loop in enumerate(loops[fn.name].loops):
            block = fn.block(loop.header)
            term = block.terminator
            if term.kind != TermKind.BR:
                continue
            inside = [label for target, label in term.successors() if target in loop.body]
            if len(inside) != 1:
                continue
            site = _branch_site(program, fn.name, loop.header)
            sensors = _slice_sensor_apis(program, pdg, site, sensor_apis)
            if not sensors:
                continue
            actions = _arm_actuations(program, pdg, (fn.name, loop.header), inside[0], closure, actuation_apis)
            if not actions:
                logger.debug("%s: sensor-bound loop without actuation, not an event", loop.loop_id)
                continue
            found.append(EventSpec(
                id="",
                kind=EventKind.CONTROL_INTENSITY,
                function=fn.name,
                block=loop.header,
                line=term.line,
                sensor_apis=tuple(sorted(sensors)),
                sensors=tuple(sorted({program.sensor_of(a) for a in sensors})),
                actuation_apis=tuple(sorted(actions)),
                action_labels=(inside[0],),
                loop_index=index,
            ))
    found.sort(key=lambda e: e.line)
    return [_with_id(e, f"L{i}") for i, e in enumerate(found, 1)]


def identify_binary_events(
    program: Program,
    pdg: Pdg,
    loops: Dict[str, LoopInfo],
    sensor_apis: Optional[Iterable[str]] = None,
    actuation_apis: Optional[Iterable[str]] = None,
) -> List[EventSpec]:
    """Non-loop branches on sensor data with a control action on either side."""
    sensor_apis = frozenset(sensor_apis if sensor_apis is not None else program.sensor_apis)
    actuation_apis = frozenset(actuation_apis if actuation_apis is not None else program.actuation_apis)
    closure = _actuation_closure(program)

    found = []
    for fn in program.functions:
        headers = {loop.header for loop in loops[fn.name].loops}
        unreachable = pdg.dominance[fn.name].unreachable
        for block in fn.blocks:
            if block.terminator.kind != TermKind.BR or block.id in headers or block.id in unreachable:
                continue
            site = _branch_site(program, fn.name, block.id)
            sensors = _slice_sensor_apis(program, pdg, site, sensor_apis)
            if not sensors:
                continue
            actions: Set[str] = set()
            labels = []
            for label in ("true", "false"):
                arm = _arm_actuations(program, pdg, (fn.name, block.id), label, closure, actuation_apis)
                if arm:
                    labels.append(label)
                    actions |= arm
            if not labels:
                continue
            predicate = extract_predicate(program, pdg, site)
            if predicate is None:
                logger.warning("%s:%d: branch condition is not a sensor threshold test; "
                               "event cannot be verified", fn.name, block.id)
            found.append(EventSpec(
                id="",
                kind=EventKind.BINARY,
                function=fn.name,
                block=block.id,
                line=block.terminator.line,
                sensor_apis=tuple(sorted(sensors)),
                sensors=tuple(sorted({program.sensor_of(a) for a in sensors})),
                actuation_apis=tuple(sorted(actions)),
                action_labels=tuple(labels),
                predicate=predicate,
            ))
    found.sort(key=lambda e: e.line)
    return [_with_id(e, f"E{i}") for i, e in enumerate(found, 1)]


def _with_id(event: EventSpec, event_id: str) -> EventSpec:
    return replace(event, id=event_id)


# ============================================
# THRESHOLD PREDICATES
# ============================================

def _defines(program: Program, site: Site, var: str) -> bool:
    if site.block == PARAM_BLOCK:
        return program.function(site.function).params[site.index] == var
    item = site_item(program, site)
    return isinstance(item, Instruction) and item.dst == var


def _reaching(program: Program, pdg: Pdg, use: Site, var: str) -> List[Site]:
    return sorted(d for d in pdg.data_deps.predecessors(use) if _defines(program, d, var))


def _callers(pdg: Pdg, param: Site) -> List[Site]:
    return sorted(pdg.data_deps.predecessors(param))


def _returns(program: Program, pdg: Pdg, call: Site) -> List[Site]:
    callee = site_item(program, call).fn
    return sorted(s for s in pdg.data_deps.predecessors(call) if s.function == callee)


def _agree(values: List[Any]) -> Any:
    if not values or any(v is None for v in values):
        return None
    return values[0] if all(v == values[0] for v in values) else None


def _constant_value(program: Program, node: ast.expr) -> Optional[float]:
    text = ast.unparse(node)
    constants = program.constant_map()
    if not expression_names(text) <= set(constants):
        return None
    try:
        value = evaluate_expression(text, constants)
    except (ArithmeticError, TypeError, ValueError):
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return None
    return float(value)


def _sensor_of_var(program: Program, pdg: Pdg, use: Site, var: str, depth: int) -> Optional[str]:
    if depth > _MAX_CHAIN:
        return None
    defs = _reaching(program, pdg, use, var)
    return _agree([_sensor_of_def(program, pdg, d, depth + 1) for d in defs])


def _sensor_of_def(program: Program, pdg: Pdg, d: Site, depth: int) -> Optional[str]:
    if d.block == PARAM_BLOCK:
        values = []
        for call in _callers(pdg, d):
            arg = parse_expression(site_item(program, call).args[d.index])
            values.append(_sensor_of_node(program, pdg, call, arg, depth))
        return _agree(values)
    item = site_item(program, d)
    if item.kind == InstrKind.READ_SENSOR:
        return program.sensor_of(item.api)
    if item.kind == InstrKind.ASSIGN:
        return _sensor_of_node(program, pdg, d, parse_expression(item.expr), depth)
    if item.kind == InstrKind.CALL:
        values = []
        for ret in _returns(program, pdg, d):
            term = site_item(program, ret)
            values.append(_sensor_of_var(program, pdg, ret, term.value, depth))
        return _agree(values)
    return None


def _sensor_of_node(program: Program, pdg: Pdg, site: Site, node: ast.expr, depth: int) -> Optional[str]:
    if isinstance(node, ast.Name) and node.id not in program.constant_map():
        return _sensor_of_var(program, pdg, site, node.id, depth)
    return None


def _predicate_of_var(program: Program, pdg: Pdg, use: Site, var: str, depth: int) -> Optional[Predicate]:
    if depth > _MAX_CHAIN:
        return None
    defs = _reaching(program, pdg, use, var)
    return _agree([_predicate_of_def(program, pdg, d, depth + 1) for d in defs])


def _predicate_of_def(program: Program, pdg: Pdg, d: Site, depth: int) -> Optional[Predicate]:
    if d.block == PARAM_BLOCK:
        values = []
        for call in _callers(pdg, d):
            arg = parse_expression(site_item(program, call).args[d.index])
            values.append(_predicate_of_node(program, pdg, call, arg, depth))
        return _agree(values)
    item = site_item(program, d)
    if item.kind == InstrKind.ASSIGN:
        return _predicate_of_node(program, pdg, d, parse_expression(item.expr), depth)
    if item.kind == InstrKind.CALL:
        values = []
        for ret in _returns(program, pdg, d):
            term = site_item(program, ret)
            values.append(_predicate_of_var(program, pdg, ret, term.value, depth))
        return _agree(values)
    return None


def _predicate_of_node(program: Program, pdg: Pdg, site: Site, node: ast.expr, depth: int) -> Optional[Predicate]:
    if isinstance(node, ast.Name):
        if node.id in program.constant_map():
            return None
        return _predicate_of_var(program, pdg, site, node.id, depth)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
        inner = _predicate_of_node(program, pdg, site, node.operand, depth)
        return inner.negated() if inner else None
    if isinstance(node, ast.Compare) and len(node.ops) == 1:
        comparator = _AST_COMPARATORS.get(type(node.ops[0]))
        if comparator is None:
            return None
        left, right = node.left, node.comparators[0]
        sensor = _sensor_of_node(program, pdg, site, left, depth)
        threshold = _constant_value(program, right)
        if sensor is not None and threshold is not None:
            return Predicate(sensor, comparator, threshold)
        sensor = _sensor_of_node(program, pdg, site, right, depth)
        threshold = _constant_value(program, left)
        if sensor is not None and threshold is not None:
            return Predicate(sensor, _MIRROR[comparator], threshold)
    return None


def extract_predicate(program: Program, pdg: Pdg, site: Site) -> Optional[Predicate]:
    """
    Threshold predicate guarding the branch at `site`, or None.

    Follows the condition through copies, `not`, call returns and call
    arguments down to a `sensor <op> constant` comparison.
    """
    term = site_item(program, site)
    if term is None or term.kind != TermKind.BR:
        return None
    return _predicate_of_var(program, pdg, site, term.cond, 0)


# ============================================
# EVENT DEPENDENCE
# ============================================

def _ancestry(node: BlockRef, ctrl_deps: nx.MultiDiGraph, anchors: Dict[BlockRef, EventSpec],
              path: FrozenSet[BlockRef]) -> Set[FrozenSet[EventLiteral]]:
    edges = sorted(
        (src, key) for src, _, key in ctrl_deps.in_edges(node, keys=True) if src not in path
    )
    if not edges:
        return {frozenset()}

    result: Set[FrozenSet[EventLiteral]] = set()
    for src, label in edges:
        upstream = _ancestry(src, ctrl_deps, anchors, path | {src})
        event = anchors.get(src)
        for conj in upstream:
            if event is None:
                result.add(conj)
                continue
            literal = EventLiteral(event.id, label == "true")
            if literal.negated() in conj:
                continue
            result.add(conj | {literal})
    return result


def simplify_alternatives(alternatives: Set[FrozenSet[EventLiteral]]) -> Set[FrozenSet[EventLiteral]]:
    alts = set(alternatives)
    changed = True
    while changed:
        changed = False
        # a & x | a & !x  ->  a
        for a in list(alts):
            for lit in a:
                twin = (a - {lit}) | {lit.negated()}
                if twin in alts:
                    alts -= {a, twin}
                    alts.add(a - {lit})
                    changed = True
                    break
            if changed:
                break
        # absorption: a | a & b  ->  a
        absorbed = {a for a in alts if any(b < a for b in alts)}
        if absorbed:
            alts -= absorbed
            changed = True
    return alts


def analyze_event_dependence(
    block: BlockRef,
    ctrl_deps: nx.MultiDiGraph,
    events: Iterable[EventSpec],
) -> Tuple[CompositeEvent, ...]:
    """
    Composite events a block depends on, as any-of alternatives.

    Walks control dependences backwards, collecting one literal per binary
    event branch crossed and passing through non-event branches. Blocks with
    no event ancestry give a single empty conjunction.
    """
    anchors = {e.anchor: e for e in events if e.kind == EventKind.BINARY}
    alternatives = simplify_alternatives(_ancestry(block, ctrl_deps, anchors, frozenset({block})))
    if not alternatives or frozenset() in alternatives:
        return (CompositeEvent(()),)
    composites = [CompositeEvent.of(a) for a in alternatives]
    composites.sort(key=lambda c: (len(c.literals), [l.sort_key for l in c.literals]))
    return tuple(composites)


def annotate_cfg(program: Program, events: Iterable[EventSpec], pdg: Optional[Pdg] = None) -> EventAnnotatedCfg:
    events = tuple(events)
    pdg = pdg or build_pdg(program)
    anchors = {e.anchor for e in events if e.kind == EventKind.BINARY}

    annotated = EventAnnotatedCfg(program=program.name, events=events, cfgs=pdg.cfgs)
    for fn in program.functions:
        unreachable = pdg.dominance[fn.name].unreachable
        for block in fn.blocks:
            ref = (fn.name, block.id)
            if ref in anchors or block.id in unreachable:
                continue
            alternatives = analyze_event_dependence(ref, pdg.ctrl_deps, events)
            if len(alternatives) == 1 and alternatives[0].unconditional:
                continue
            annotated.block_annotations[ref] = alternatives

    for event in events:
        if event.kind == EventKind.CONTROL_INTENSITY:
            annotated.loop_annotations[event.loop_id] = event

    for ref in annotated.disjunctive_blocks:
        logger.info("block %s:%d depends on any of %s", ref[0], ref[1],
                    format_alternatives(annotated.block_annotations[ref]))
    return annotated


# ============================================
# PIPELINE
# ============================================

@dataclass
class ProgramAnalysis:
    program: Program
    cfgs: Dict[str, Cfg]
    dominance: Dict[str, Dominance]
    loops: Dict[str, LoopInfo]
    pdg: Pdg
    annotated: EventAnnotatedCfg

    @property
    def events(self) -> Tuple[EventSpec, ...]:
        return self.annotated.events


def analyze_program(program: Program) -> ProgramAnalysis:
    """Run every static pass: CFGs, dominance, loops, PDG, events, annotations."""
    cfgs = build_cfgs(program)
    dominance = {name: compute_dominance(cfg) for name, cfg in cfgs.items()}
    loops = find_program_loops(program, cfgs, dominance)
    pdg = build_pdg(program, cfgs, dominance)
    binary = identify_binary_events(program, pdg, loops)
    intensity = identify_control_intensity_events(program, pdg, loops)
    annotated = annotate_cfg(program, binary + intensity, pdg)
    return ProgramAnalysis(program, cfgs, dominance, loops, pdg, annotated)


def format_report(annotated: EventAnnotatedCfg) -> List[str]:
    """Human-readable annotation report, one line per event and annotation."""
    lines = []
    for event in annotated.events:
        where = f"{event.function}:{event.block}"
        if event.kind == EventKind.BINARY:
            predicate = str(event.predicate) if event.predicate else "unsupported predicate"
            lines.append(f"event {event.id} binary {where} line {event.line} [{predicate}] "
                         f"actions on {'/'.join(event.action_labels)}")
        else:
            lines.append(f"event {event.id} control_intensity {where} line {event.line} "
                         f"sensors {','.join(event.sensors)} actuators {','.join(event.actuation_apis)}")
    for (fn, block), alternatives in sorted(annotated.block_annotations.items()):
        flag = "  (any-of)" if len(alternatives) > 1 else ""
        lines.append(f"block {fn}:{block} <- {format_alternatives(alternatives)}{flag}")
    for loop_id, event in sorted(annotated.loop_annotations.items()):
        lines.append(f"loop {loop_id} <- {event.id}")
    return lines


def annotations_to_dict(annotated: EventAnnotatedCfg) -> Dict[str, Any]:
    return {
        "format": ANNOTATION_FORMAT,
        "version": ANNOTATION_VERSION,
        "program": annotated.program,
        "events": [e.to_dict() for e in annotated.events],
        "blocks": [
            {"function": fn, "block": block, "alternatives": [c.to_list() for c in alts]}
            for (fn, block), alts in sorted(annotated.block_annotations.items())
        ],
        "loops": [
            {"loop_id": loop_id, "event": event.id}
            for loop_id, event in sorted(annotated.loop_annotations.items())
        ],
        "_generated": {"tool": "aulos", "version": _tool_version()},
    }


def annotations_from_dict(data: Dict[str, Any]) -> EventAnnotatedCfg:
    if data.get("format") != ANNOTATION_FORMAT:
        raise AnalysisError(f"not an annotation file (format={data.get('format')!r})")
    if data.get("version") != ANNOTATION_VERSION:
        raise AnalysisError(f"unsupported annotation version {data.get('version')}")
    events = tuple(EventSpec.from_dict(e) for e in data["events"])
    by_id = {e.id: e for e in events}
    annotated = EventAnnotatedCfg(program=data["program"], events=events)
    for entry in data["blocks"]:
        alts = tuple(CompositeEvent.of(EventLiteral.parse(l) for l in lits) for lits in entry["alternatives"])
        for alt in alts:
            for lit in alt.literals:
                if lit.event_id not in by_id:
                    raise AnalysisError(f"annotation references unknown event {lit.event_id}")
        annotated.block_annotations[(entry["function"], int(entry["block"]))] = alts
    for entry in data["loops"]:
        annotated.loop_annotations[entry["loop_id"]] = by_id[entry["event"]]
    return annotated


def save_annotations(annotated: EventAnnotatedCfg, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(annotations_to_dict(annotated), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_annotations(path) -> EventAnnotatedCfg:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise AnalysisError(f"{path}: {e}")
    return annotations_from_dict(data)


def _tool_version() -> str:
    from . import __version__
    return __version__
