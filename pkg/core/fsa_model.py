"""
FSA model for Aulos.
Parses syscall traces, learns the PC-keyed automaton, splits traces into scan
cycles and attaches event constraints and control-intensity loops to it.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, Iterator, List, NamedTuple, Optional, Set, Tuple

import networkx as nx

from .event_analysis import (
    BlockRef, CompositeEvent, EventAnnotatedCfg, EventLiteral, EventSpec,
    format_alternatives, simplify_alternatives,
)
from .intensity_model import IntensityModel
from .mini_ir import (
    InstrKind, Program, Site, TermKind, build_cfgs, compute_dominance, find_program_loops,
)

logger = logging.getLogger(__name__)

START = -1
MODEL_FORMAT = "aulos-efsa"
MODEL_VERSION = 1


class TraceFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class FsaError(ValueError):
    pass


class WindowError(FsaError):
    pass


class ModelFormatError(FsaError):
    pass


# ============================================
# TRACES
# ============================================

@dataclass(frozen=True)
class TraceRecord:
    timestamp: float
    pc: int
    syscall: str

    def format(self) -> str:
        return f"{self.timestamp:.6f} 0x{self.pc:x} {self.syscall}"


def iter_trace(lines: Iterable[str]) -> Iterator[TraceRecord]:
    """Yield records from trace lines, validating as they arrive."""
    last = None
    for lineno, raw in enumerate(lines, 1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) != 3:
            raise TraceFormatError(f"expected '<timestamp> <0xPC> <syscall>', got {text!r}", lineno)
        try:
            timestamp = float(parts[0])
        except ValueError:
            raise TraceFormatError(f"bad timestamp {parts[0]!r}", lineno)
        if not parts[1].lower().startswith("0x"):
            raise TraceFormatError(f"bad hex pc {parts[1]!r}", lineno)
        try:
            pc = int(parts[1], 16)
        except ValueError:
            raise TraceFormatError(f"bad hex pc {parts[1]!r}", lineno)
        if last is not None and timestamp < last:
            raise TraceFormatError(f"timestamp {timestamp} goes back in time (previous {last})", lineno)
        last = timestamp
        yield TraceRecord(timestamp, pc, parts[2])


def parse_trace(text: str) -> List[TraceRecord]:
    return list(iter_trace(text.splitlines()))


def load_trace(path) -> List[TraceRecord]:
    with open(path) as f:
        return list(iter_trace(f))


def format_trace(records: Iterable[TraceRecord]) -> str:
    return "".join(r.format() + "\n" for r in records)


def write_trace(records: Iterable[TraceRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(format_trace(records))
    return path


# ============================================
# FSA
# ============================================

class Edge(NamedTuple):
    """Transition src -> dst labeled with the syscall issued at src (at s0: at dst)."""
    src: int
    label: str
    dst: int


def state_name(state: int) -> str:
    return "s0" if state == START else f"0x{state:x}"


def parse_state(text: str) -> int:
    return START if text == "s0" else int(text, 16)


def transition_edge(current: int, last_syscall: Optional[str], rec: TraceRecord) -> Edge:
    label = rec.syscall if current == START else last_syscall
    return Edge(current, label, rec.pc)


@dataclass
class Fsa:
    edges: Set[Edge] = field(default_factory=set)
    states: Set[int] = field(default_factory=lambda: {START})
    finals: Set[int] = field(default_factory=set)
    emits: Dict[int, str] = field(default_factory=dict)
    edge_counts: Counter = field(default_factory=Counter)

    def out_edges(self, state: int) -> List[Edge]:
        return sorted(e for e in self.edges if e.src == state)

    def accepts(self, edge: Edge, syscall: str) -> bool:
        return edge in self.edges and self.emits.get(edge.dst) == syscall

    def replay(self, records: Iterable[TraceRecord]) -> List[int]:
        """Indices of records that take an illegal transition."""
        violations = []
        current, last = START, None
        for i, rec in enumerate(records):
            edge = transition_edge(current, last, rec)
            if not self.accepts(edge, rec.syscall):
                violations.append(i)
                current = rec.pc if rec.pc in self.states else START
            else:
                current = rec.pc
            last = rec.syscall
        return violations

    @property
    def alphabet(self) -> List[str]:
        return sorted(set(self.emits.values()))

    def without(self, edge: Edge) -> "Fsa":
        edges = set(self.edges) - {edge}
        counts = Counter({e: c for e, c in self.edge_counts.items() if e != edge})
        return Fsa(edges, set(self.states), set(self.finals), dict(self.emits), counts)


def learn_fsa(traces: Iterable[List[TraceRecord]]) -> Fsa:
    """Merge training traces into one PC-keyed automaton."""
    fsa = Fsa()
    seen = 0
    for trace in traces:
        if not trace:
            continue
        seen += 1
        current, last = START, None
        for rec in trace:
            known = fsa.emits.setdefault(rec.pc, rec.syscall)
            if known != rec.syscall:
                raise FsaError(f"pc 0x{rec.pc:x} issues both {known} and {rec.syscall}")
            edge = transition_edge(current, last, rec)
            fsa.edges.add(edge)
            fsa.edge_counts[edge] += 1
            fsa.states.add(rec.pc)
            current, last = rec.pc, rec.syscall
        fsa.finals.add(current)
    if not seen:
        raise FsaError("no training records")
    return fsa


@dataclass(frozen=True)
class BehaviorInstance:
    """Trace slice covering one scan cycle."""
    records: Tuple[TraceRecord, ...]
    window_index: int
    complete: bool = True

    @property
    def start(self) -> float:
        return self.records[0].timestamp

    def __len__(self) -> int:
        return len(self.records)


def partition_windows(trace: List[TraceRecord], header_pc: int, fsa: Optional[Fsa] = None) -> List[BehaviorInstance]:
    """Split a trace at every visit of the scan-cycle header; the trailing window is incomplete."""
    if fsa is not None and header_pc not in fsa.states:
        raise WindowError(f"window header {state_name(header_pc)} is not a state of the model")
    starts = [i for i, rec in enumerate(trace) if rec.pc == header_pc]
    if not starts:
        raise WindowError(f"window header {state_name(header_pc)} never observed")
    windows = []
    for n, begin in enumerate(starts):
        end = starts[n + 1] if n + 1 < len(starts) else len(trace)
        complete = n + 1 < len(starts)
        windows.append(BehaviorInstance(tuple(trace[begin:end]), n, complete))
    return windows


# ============================================
# STATIC SYSCALL FLOW
# ============================================

# Execution position: (call context, function, block, instruction index)
Position = Tuple[Tuple[Site, ...], str, int, int]
_END = "end"


@dataclass(frozen=True)
class FlowPath:
    """One static path between consecutive syscalls."""
    constraint: Optional[Tuple[CompositeEvent, ...]]
    exits: FrozenSet[str]
    blocks: FrozenSet[BlockRef]


@dataclass
class SyscallFlow:
    """Every statically possible pair of consecutive syscall sites."""
    paths: Dict[Tuple[int, int], List[FlowPath]] = field(default_factory=dict)
    emits: Dict[int, str] = field(default_factory=dict)
    terminal: Set[int] = field(default_factory=set)

    def successors(self, state: int) -> List[int]:
        return sorted(dst for src, dst in self.paths if src == state)


class _Walker:
    def __init__(self, program: Program, annotated: EventAnnotatedCfg):
        self.program = program
        self.annotated = annotated
        self.functions = {fn.name: fn for fn in program.functions}
        self.blocks = {fn.name: fn.block_map() for fn in program.functions}
        cfgs = build_cfgs(program)
        self.dominance = {name: compute_dominance(cfg) for name, cfg in cfgs.items()}
        self.loops = find_program_loops(program, cfgs, self.dominance)
        self.intensity = {}
        for event in annotated.intensity_events:
            loop = self.loops[event.function].by_header(event.block)
            if loop is not None:
                self.intensity.setdefault(event.function, []).append((loop, event))

    def instr(self, pos: Position):
        _, fn, b, i = pos
        block = self.blocks[fn][b]
        return block.instrs[i] if i < len(block.instrs) else None

    def is_syscall(self, pos) -> bool:
        if pos == _END:
            return False
        ins = self.instr(pos)
        return ins is not None and ins.kind == InstrKind.SYSCALL

    def step(self, pos: Position) -> List[Tuple[Any, FrozenSet]]:
        """Successor positions with the markers crossed on the way."""
        ctx, fn, b, i = pos
        block = self.blocks[fn][b]
        if i < len(block.instrs):
            ins = block.instrs[i]
            if ins.kind == InstrKind.CALL:
                callee = self.functions[ins.fn]
                inner = (ctx + (Site(fn, b, i),), ins.fn, callee.entry, 0)
                return [(inner, self.entering(ins.fn, None, callee.entry))]
            return [((ctx, fn, b, i + 1), frozenset())]
        term = block.terminator
        if term.kind == TermKind.RET:
            if not ctx:
                return [(_END, frozenset())]
            call = ctx[-1]
            return [((ctx[:-1], call.function, call.block, call.index + 1), frozenset())]
        return [((ctx, fn, t, 0), self.entering(fn, b, t)) for t, _ in term.successors()]

    def entering(self, fn: str, src: Optional[int], dst: int) -> FrozenSet:
        markers = set()
        if (fn, dst) in self.annotated.block_annotations:
            markers.add(("block", fn, dst))
        if src is not None:
            for loop, event in self.intensity.get(fn, []):
                if src in loop.body and dst not in loop.body:
                    markers.add(("exit", loop.loop_id))
        return frozenset(markers)

    def reach(self, starts: List[Tuple[Any, FrozenSet]], stay_in: Optional[Tuple[str, FrozenSet[int]]] = None):
        """(next syscall position or END, markers) pairs reachable from `starts`."""
        found = set()
        seen = set()
        stack = list(starts)
        while stack:
            pos, markers = stack.pop()
            if (pos, markers) in seen:
                continue
            seen.add((pos, markers))
            if pos == _END or self.is_syscall(pos):
                found.add((pos, markers))
                continue
            for nxt, crossed in self.step(pos):
                if stay_in is not None and nxt != _END:
                    fn, body = stay_in
                    ctx = nxt[0]
                    if not ctx and nxt[1] == fn and nxt[2] not in body:
                        continue
                stack.append((nxt, markers | crossed))
        return found

    def literals_of(self, ref: BlockRef) -> FrozenSet[EventLiteral]:
        alts = self.annotated.block_annotations.get(ref)
        if not alts:
            return frozenset()
        common = set(alts[0].literals)
        for alt in alts[1:]:
            common &= set(alt.literals)
        return frozenset(common)

    def effective(self, pos) -> FrozenSet[EventLiteral]:
        if pos is None:
            return frozenset()
        ctx, fn, b, _ = pos
        lits = set(self.literals_of((fn, b)))
        for call in ctx:
            lits |= self.literals_of((call.function, call.block))
        return frozenset(lits)

    def path(self, src, markers: FrozenSet) -> FlowPath:
        blocks = sorted((m[1], m[2]) for m in markers if m[0] == "block")
        exits = frozenset(m[1] for m in markers if m[0] == "exit")
        if not blocks:
            return FlowPath(None, exits, frozenset())

        combined: Set[FrozenSet[EventLiteral]] = {frozenset()}
        for ref in blocks:
            merged = set()
            for conj in combined:
                for alt in self.annotated.block_annotations[ref]:
                    lits = conj | set(alt.literals)
                    if any(l.negated() in lits for l in lits):
                        continue
                    merged.add(frozenset(lits))
            combined = merged

        known = self.effective(src)
        reduced = simplify_alternatives({conj - known for conj in combined})
        if not reduced or frozenset() in reduced:
            return FlowPath(None, exits, frozenset(blocks))
        alts = tuple(sorted((CompositeEvent.of(c) for c in reduced), key=_composite_key))
        return FlowPath(alts, exits, frozenset(blocks))


def _composite_key(c: CompositeEvent):
    return (len(c.literals), [l.sort_key for l in c.literals])


def build_syscall_flow(program: Program, annotated: EventAnnotatedCfg) -> SyscallFlow:
    """
    Static map of consecutive syscall pairs.

    Calls are inlined with their context, so a transition carries the
    annotated blocks it enters and the control-intensity loops it leaves.
    """
    walker = _Walker(program, annotated)
    flow = SyscallFlow()
    entry = walker.functions[program.entry]
    origin: Position = ((), entry.name, entry.entry, 0)

    pending: List[Tuple[int, Optional[Position], List]] = [(START, None, [(origin, frozenset())])]
    visited: Set[Position] = set()
    while pending:
        state, src_pos, starts = pending.pop()
        for pos, markers in sorted(walker.reach(starts), key=repr):
            if pos == _END:
                flow.terminal.add(state)
                continue
            ins = walker.instr(pos)
            flow.emits[ins.pc] = ins.name
            flow.paths.setdefault((state, ins.pc), []).append(walker.path(src_pos, markers))
            if pos not in visited:
                visited.add(pos)
                pending.append((ins.pc, pos, walker.step(pos)))
    return flow


def _merge_paths(paths: List[FlowPath]) -> Optional[Tuple[CompositeEvent, ...]]:
    if any(p.constraint is None for p in paths):
        return None
    alternatives = set()
    for p in paths:
        for alt in p.constraint:
            alternatives.add(frozenset(alt.literals))
    reduced = simplify_alternatives(alternatives)
    if frozenset() in reduced:
        return None
    return tuple(sorted((CompositeEvent.of(c) for c in reduced), key=_composite_key))


def find_window_header(program: Program) -> int:
    """PC of the first syscall in the body of the entry function's top-level loop."""
    cfgs = build_cfgs(program)
    dominance = {name: compute_dominance(cfg) for name, cfg in cfgs.items()}
    loops = find_program_loops(program, cfgs, dominance)
    top = loops[program.entry].top_level_loops
    if not top:
        raise FsaError(f"entry function '{program.entry}' has no top-level loop")
    if len(top) > 1:
        logger.warning("several top-level loops in '%s'; using the one at block %d", program.entry, top[0].header)
    loop = top[0]
    walker = _Walker(program, EventAnnotatedCfg(program.name, ()))
    starts = _body_starts(walker, program.entry, loop)
    reached = walker.reach(starts, stay_in=(program.entry, loop.body))
    pcs = {walker.instr(pos).pc for pos, _ in reached if pos != _END}
    if len(pcs) != 1:
        raise FsaError(f"scan loop {loop.loop_id} does not start with a unique syscall ({sorted(pcs)})")
    return pcs.pop()


def _body_starts(walker: _Walker, fn: str, loop) -> List[Tuple[Position, FrozenSet]]:
    block = walker.blocks[fn][loop.header]
    if block.instrs:
        return [(((), fn, loop.header, 0), frozenset())]
    return [(((), fn, t, 0), frozenset()) for t, _ in block.terminator.successors() if t in loop.body]


# ============================================
# eFSA
# ============================================

@dataclass
class IntensityLoop:
    """A control-intensity loop as seen by the automaton."""
    loop_id: str
    event_id: str
    sensor: str
    head_pc: int
    body_pcs: Tuple[int, ...]
    per_iteration_syscall_count: int
    entry_edges: Tuple[Edge, ...] = ()
    body_edges: Tuple[Edge, ...] = ()
    exit_edges: Tuple[Edge, ...] = ()
    model: Optional[IntensityModel] = None
    tolerance: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "loop_id": self.loop_id,
            "event_id": self.event_id,
            "sensor": self.sensor,
            "head_pc": state_name(self.head_pc),
            "body_pcs": [state_name(pc) for pc in self.body_pcs],
            "per_iteration_syscall_count": self.per_iteration_syscall_count,
            "entry_edges": [_edge_to_list(e) for e in self.entry_edges],
            "body_edges": [_edge_to_list(e) for e in self.body_edges],
            "exit_edges": [_edge_to_list(e) for e in self.exit_edges],
            "model": self.model.to_dict() if self.model else None,
            "tolerance": self.tolerance,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IntensityLoop":
        return cls(
            loop_id=data["loop_id"],
            event_id=data["event_id"],
            sensor=data["sensor"],
            head_pc=parse_state(data["head_pc"]),
            body_pcs=tuple(parse_state(s) for s in data["body_pcs"]),
            per_iteration_syscall_count=int(data["per_iteration_syscall_count"]),
            entry_edges=tuple(_edge_from_list(e) for e in data["entry_edges"]),
            body_edges=tuple(_edge_from_list(e) for e in data["body_edges"]),
            exit_edges=tuple(_edge_from_list(e) for e in data["exit_edges"]),
            model=IntensityModel.from_dict(data["model"]) if data.get("model") else None,
            tolerance=data.get("tolerance"),
        )


@dataclass
class Efsa:
    program: str
    fsa: Fsa
    events: Tuple[EventSpec, ...] = ()
    event_edges: Dict[Edge, Tuple[CompositeEvent, ...]] = field(default_factory=dict)
    intensity_loops: Dict[str, IntensityLoop] = field(default_factory=dict)
    window_header: Optional[int] = None
    unmapped: Tuple[BlockRef, ...] = ()
    baselines: Dict[str, Any] = field(default_factory=dict)

    def event(self, event_id: str) -> EventSpec:
        for event in self.events:
            if event.id == event_id:
                return event
        raise KeyError(event_id)

    def six_tuple(self) -> Dict[str, Any]:
        """(S, Sigma, s0, F, E, delta) view of the model."""
        return {
            "S": sorted(self.fsa.states),
            "Sigma": self.fsa.alphabet,
            "s0": START,
            "F": sorted(self.fsa.finals),
            "E": [e.id for e in self.events],
            "delta": {edge: self.event_edges.get(edge) for edge in sorted(self.fsa.edges)},
        }


def _per_iteration_count(walker: _Walker, fn: str, loop) -> Optional[int]:
    """Syscalls issued by one pass around the loop body, if every path agrees."""
    sub = nx.DiGraph()
    sub.add_nodes_from(loop.body)
    for u in loop.body:
        for v, _ in walker.blocks[fn][u].terminator.successors():
            if v in loop.body and (u, v) not in loop.back_edges:
                sub.add_edge(u, v)
    counts = set()
    for tail, _ in loop.back_edges:
        paths = [[loop.header]] if tail == loop.header else nx.all_simple_paths(sub, loop.header, tail)
        for path in paths:
            total = 0
            for b in path:
                n = _block_syscalls(walker, fn, b)
                if n is None:
                    return None
                total += n
            counts.add(total)
    return counts.pop() if len(counts) == 1 else None


def _block_syscalls(walker: _Walker, fn: str, block_id: int) -> Optional[int]:
    total = 0
    for ins in walker.blocks[fn][block_id].instrs:
        if ins.kind == InstrKind.SYSCALL:
            total += 1
        elif ins.kind == InstrKind.CALL:
            n = _function_syscalls(walker, ins.fn)
            if n is None:
                return None
            total += n
    return total


def _function_syscalls(walker: _Walker, fn: str) -> Optional[int]:
    function = walker.functions[fn]
    graph = nx.DiGraph()
    for block in function.blocks:
        graph.add_node(block.id)
        for t, _ in block.terminator.successors():
            graph.add_edge(block.id, t)
    if not nx.is_directed_acyclic_graph(graph):
        return None
    rets = [b.id for b in function.blocks if b.terminator.kind == TermKind.RET]
    counts = set()
    for ret in rets:
        paths = [[function.entry]] if ret == function.entry else nx.all_simple_paths(graph, function.entry, ret)
        for path in paths:
            total = 0
            for b in path:
                n = _block_syscalls(walker, fn, b)
                if n is None:
                    return None
                total += n
            counts.add(total)
    return counts.pop() if len(counts) == 1 else None


def _body_pcs(walker: _Walker, fn: str, blocks: Iterable[int]) -> Set[int]:
    pcs: Set[int] = set()
    for b in blocks:
        for ins in walker.blocks[fn][b].instrs:
            if ins.kind == InstrKind.SYSCALL:
                pcs.add(ins.pc)
            elif ins.kind == InstrKind.CALL:
                callee = walker.functions[ins.fn]
                pcs |= _body_pcs(walker, ins.fn, [blk.id for blk in callee.blocks])
    return pcs


def augment_efsa(fsa: Fsa, annotated: EventAnnotatedCfg, program: Program) -> Efsa:
    """Attach binary-event constraints and control-intensity loops to a learned Fsa."""
    walker = _Walker(program, annotated)
    flow = build_syscall_flow(program, annotated)

    for pc, name in sorted(fsa.emits.items()):
        if flow.emits.get(pc) not in (None, name):
            raise FsaError(f"trace pc 0x{pc:x} issues {name}, program says {flow.emits[pc]}")
        if pc not in flow.emits:
            logger.warning("trace pc 0x%x is not a syscall site of %s", pc, program.name)

    event_edges: Dict[Edge, Tuple[CompositeEvent, ...]] = {}
    exits: Dict[str, List[Edge]] = {}
    covered: Set[BlockRef] = set()
    for edge in sorted(fsa.edges):
        paths = flow.paths.get((edge.src, edge.dst))
        if not paths:
            logger.warning("edge %s -> %s has no static path in %s",
                           state_name(edge.src), state_name(edge.dst), program.name)
            continue
        constraint = _merge_paths(paths)
        if constraint:
            event_edges[edge] = constraint
            for p in paths:
                covered |= p.blocks
        for loop_id in sorted(set().union(*(p.exits for p in paths))):
            exits.setdefault(loop_id, []).append(edge)

    unmapped = tuple(sorted(set(annotated.block_annotations) - covered))
    for fn, block in unmapped:
        logger.warning("annotated block %s:%d (%s) is not covered by any learned transition", fn, block,
                       format_alternatives(annotated.block_annotations[(fn, block)]))

    intensity: Dict[str, IntensityLoop] = {}
    for event in annotated.intensity_events:
        loop = walker.loops[event.function].by_header(event.block)
        if loop is None:
            logger.warning("control-intensity event %s has no loop at %s:%d", event.id, event.function, event.block)
            continue
        per = _per_iteration_count(walker, event.function, loop)
        if not per:
            logger.warning("loop %s has no fixed per-iteration syscall count; intensity check disabled",
                           loop.loop_id)
            continue
        starts = _body_starts(walker, event.function, loop)
        heads = set()
        for pos, _ in walker.reach(starts, stay_in=(event.function, loop.body)):
            if pos != _END:
                heads.add(walker.instr(pos).pc)
        if len(heads) != 1:
            logger.warning("loop %s does not start with a unique syscall; intensity check disabled", loop.loop_id)
            continue
        head = heads.pop()
        body = _body_pcs(walker, event.function, loop.body)
        intensity[loop.loop_id] = IntensityLoop(
            loop_id=loop.loop_id,
            event_id=event.id,
            sensor=event.sensors[0],
            head_pc=head,
            body_pcs=tuple(sorted(body)),
            per_iteration_syscall_count=per,
            entry_edges=tuple(e for e in sorted(fsa.edges) if e.dst == head and e.src not in body),
            body_edges=tuple(e for e in sorted(fsa.edges) if e.src in body and e.dst in body),
            exit_edges=tuple(exits.get(loop.loop_id, [])),
        )

    try:
        header = find_window_header(program)
    except FsaError as e:
        logger.warning("%s", e)
        header = None

    return Efsa(
        program=program.name,
        fsa=fsa,
        events=tuple(annotated.events),
        event_edges=event_edges,
        intensity_loops=intensity,
        window_header=header,
        unmapped=unmapped,
    )


# ============================================
# MODEL FILE
# ============================================

def _edge_to_list(edge: Edge) -> List[str]:
    return [state_name(edge.src), edge.label, state_name(edge.dst)]


def _edge_from_list(data: List[str]) -> Edge:
    return Edge(parse_state(data[0]), data[1], parse_state(data[2]))


def efsa_to_dict(efsa: Efsa) -> Dict[str, Any]:
    fsa = efsa.fsa
    edges = []
    for edge in sorted(fsa.edges):
        constraint = efsa.event_edges.get(edge)
        edges.append({
            "edge": _edge_to_list(edge),
            "count": fsa.edge_counts.get(edge, 0),
            "constraint": [c.to_list() for c in constraint] if constraint else None,
        })
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "program": efsa.program,
        "window_header": state_name(efsa.window_header) if efsa.window_header is not None else None,
        "states": [state_name(s) for s in sorted(fsa.states)],
        "finals": [state_name(s) for s in sorted(fsa.finals)],
        "emits": {state_name(pc): name for pc, name in sorted(fsa.emits.items())},
        "edges": edges,
        "events": [e.to_dict() for e in efsa.events],
        "intensity_loops": [efsa.intensity_loops[k].to_dict() for k in sorted(efsa.intensity_loops)],
        "unmapped": [f"{fn}:{block}" for fn, block in efsa.unmapped],
        "baselines": efsa.baselines,
        "_generated": {"tool": "aulos", "version": _tool_version()},
    }


def efsa_from_dict(data: Dict[str, Any]) -> Efsa:
    if data.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"not an eFSA model (format={data.get('format')!r})")
    if data.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {data.get('version')}")
    try:
        fsa = Fsa(
            states={parse_state(s) for s in data["states"]},
            finals={parse_state(s) for s in data["finals"]},
            emits={parse_state(k): v for k, v in data["emits"].items()},
        )
        event_edges = {}
        for entry in data["edges"]:
            edge = _edge_from_list(entry["edge"])
            fsa.edges.add(edge)
            fsa.edge_counts[edge] = int(entry.get("count", 0))
            if entry.get("constraint"):
                event_edges[edge] = tuple(
                    CompositeEvent.of(EventLiteral.parse(l) for l in alt) for alt in entry["constraint"]
                )
        loops = [IntensityLoop.from_dict(d) for d in data.get("intensity_loops", [])]
        unmapped = tuple(
            (ref.rsplit(":", 1)[0], int(ref.rsplit(":", 1)[1])) for ref in data.get("unmapped", [])
        )
        header = data.get("window_header")
        return Efsa(
            program=data.get("program", ""),
            fsa=fsa,
            events=tuple(EventSpec.from_dict(e) for e in data.get("events", [])),
            event_edges=event_edges,
            intensity_loops={loop.loop_id: loop for loop in loops},
            window_header=parse_state(header) if header else None,
            unmapped=unmapped,
            baselines=data.get("baselines", {}),
        )
    except (KeyError, ValueError, TypeError, IndexError) as e:
        raise ModelFormatError(f"malformed model: {e}")


def dump_model(efsa: Efsa) -> str:
    return json.dumps(efsa_to_dict(efsa), indent=2, sort_keys=True) + "\n"


def save_model(efsa: Efsa, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(dump_model(efsa))
    return path


def load_model(path) -> Efsa:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"{path}: {e}")
    return efsa_from_dict(data)


def _tool_version() -> str:
    from . import __version__
    return __version__
