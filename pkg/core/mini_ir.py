"""
Mini IR for Aulos.
Parses the line-oriented control-program IR and builds CFGs, dominator trees,
natural loops and the program dependence graph the event analysis runs on.

See docs/ir_grammar.md for the exact grammar.
"""

import ast
import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import Any, Dict, FrozenSet, Iterator, List, Mapping, NamedTuple, Optional, Set, Tuple

import networkx as nx

logger = logging.getLogger(__name__)

# Virtual exit node of the post-dominator tree
EXIT = -1

# Block id used for function parameter sites in the PDG
PARAM_BLOCK = -1

# Functions an expression may call
EXPR_BUILTINS = {
    "int": int,
    "float": float,
    "abs": abs,
    "min": min,
    "max": max,
    "round": round,
}


# ============================================
# ERRORS
# ============================================

class IRError(ValueError):
    """Invalid IR source. Carries the 1-based line and column when known."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.message = message
        self.line = line
        self.column = column
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column else "")
            super().__init__(f"{where}: {message}")
        else:
            super().__init__(message)


class IRSyntaxError(IRError):
    pass


class UndeclaredNameError(IRError):
    """Call to an unknown function or use of an undeclared API."""


class DuplicatePCError(IRError):
    pass


class DanglingTargetError(IRError):
    pass


class UndefinedVariableError(IRError):
    pass


class IrreducibleCFGError(IRError):
    pass


# ============================================
# TYPES
# ============================================

class ApiKind(Enum):
    SENSOR_READ = "sensor_read"
    ACTUATION = "actuation"


class InstrKind(Enum):
    READ_SENSOR = "read_sensor"
    ASSIGN = "assign"
    CALL = "call"
    ACTUATE = "actuate"
    SYSCALL = "syscall"


class TermKind(Enum):
    BR = "br"
    JMP = "jmp"
    RET = "ret"


@dataclass(frozen=True)
class ApiDecl:
    """A declared sensor-read or actuation API."""
    name: str
    kind: ApiKind
    sensor: Optional[str] = None


@dataclass(frozen=True)
class Instruction:
    kind: InstrKind
    line: int
    dst: Optional[str] = None
    api: Optional[str] = None
    expr: Optional[str] = None
    fn: Optional[str] = None
    args: Tuple[str, ...] = ()
    name: Optional[str] = None
    pc: Optional[int] = None

    def expressions(self) -> Tuple[str, ...]:
        if self.kind == InstrKind.ASSIGN:
            return (self.expr,)
        if self.kind in (InstrKind.CALL, InstrKind.ACTUATE):
            return self.args
        return ()

    def uses(self, constants: Mapping[str, Any]) -> FrozenSet[str]:
        names: Set[str] = set()
        for expr in self.expressions():
            names |= expression_names(expr)
        return frozenset(n for n in names if n not in constants)


@dataclass(frozen=True)
class Terminator:
    kind: TermKind
    line: int
    cond: Optional[str] = None
    true_target: Optional[int] = None
    false_target: Optional[int] = None
    target: Optional[int] = None
    value: Optional[str] = None
    implicit: bool = False

    def successors(self) -> List[Tuple[int, str]]:
        """(target block, edge label) pairs."""
        if self.kind == TermKind.BR:
            return [(self.true_target, "true"), (self.false_target, "false")]
        if self.kind == TermKind.JMP:
            return [(self.target, "fallthrough")]
        return []

    def uses(self) -> FrozenSet[str]:
        if self.kind == TermKind.BR:
            return frozenset({self.cond})
        if self.kind == TermKind.RET and self.value:
            return frozenset({self.value})
        return frozenset()


@dataclass(frozen=True)
class BasicBlock:
    id: int
    instrs: Tuple[Instruction, ...]
    terminator: Terminator
    line: int = 0


@dataclass(frozen=True)
class Function:
    name: str
    params: Tuple[str, ...]
    blocks: Tuple[BasicBlock, ...]
    line: int = 0

    @property
    def entry(self) -> int:
        return self.blocks[0].id

    def block(self, block_id: int) -> BasicBlock:
        for block in self.blocks:
            if block.id == block_id:
                return block
        raise KeyError(f"{self.name}: no block {block_id}")

    def block_map(self) -> Dict[int, BasicBlock]:
        return {b.id: b for b in self.blocks}


@dataclass(frozen=True)
class Program:
    name: str
    functions: Tuple[Function, ...]
    entry: str
    api_decls: Tuple[ApiDecl, ...]
    constants: Tuple[Tuple[str, float], ...] = ()

    def function(self, name: str) -> Function:
        for fn in self.functions:
            if fn.name == name:
                return fn
        raise KeyError(f"no function {name}")

    def api(self, name: str) -> Optional[ApiDecl]:
        for decl in self.api_decls:
            if decl.name == name:
                return decl
        return None

    @property
    def sensor_apis(self) -> FrozenSet[str]:
        return frozenset(d.name for d in self.api_decls if d.kind == ApiKind.SENSOR_READ)

    @property
    def actuation_apis(self) -> FrozenSet[str]:
        return frozenset(d.name for d in self.api_decls if d.kind == ApiKind.ACTUATION)

    def constant_map(self) -> Dict[str, float]:
        return dict(self.constants)

    def sensor_of(self, api: str) -> str:
        decl = self.api(api)
        return decl.sensor if decl and decl.sensor else api

    def with_constants(self, overrides: Mapping[str, float]) -> "Program":
        """Copy of the program with some `const` values replaced."""
        values = self.constant_map()
        for name, value in overrides.items():
            if name not in values:
                raise IRError(f"unknown constant '{name}'")
            values[name] = value
        return replace(self, constants=tuple(values.items()))

    def syscall_sites(self) -> Iterator[Tuple["Site", Instruction]]:
        for fn in self.functions:
            for block in fn.blocks:
                for index, instr in enumerate(block.instrs):
                    if instr.kind == InstrKind.SYSCALL:
                        yield Site(fn.name, block.id, index), instr


class Site(NamedTuple):
    """Instruction location. index == len(instrs) names the terminator."""
    function: str
    block: int
    index: int


# ============================================
# EXPRESSIONS
# ============================================

_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.BoolOp, ast.Compare, ast.Name,
    ast.Load, ast.Constant, ast.Call,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.FloorDiv, ast.Mod,
    ast.USub, ast.UAdd, ast.Not, ast.And, ast.Or,
    ast.Lt, ast.LtE, ast.Gt, ast.GtE, ast.Eq, ast.NotEq,
)

_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.FloorDiv: lambda a, b: a // b,
    ast.Mod: lambda a, b: a % b,
}

_COMPARES = {
    ast.Lt: lambda a, b: a < b,
    ast.LtE: lambda a, b: a <= b,
    ast.Gt: lambda a, b: a > b,
    ast.GtE: lambda a, b: a >= b,
    ast.Eq: lambda a, b: a == b,
    ast.NotEq: lambda a, b: a != b,
}


@lru_cache(maxsize=None)
def parse_expression(text: str) -> ast.expr:
    """Parse and vet an IR expression. Raises SyntaxError or ValueError."""
    tree = ast.parse(text.strip(), mode="eval")
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ValueError(f"unsupported expression element '{type(node).__name__}'")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float, bool)):
            raise ValueError("only numeric constants are allowed")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in EXPR_BUILTINS or node.keywords:
                raise ValueError("only int/float/abs/min/max/round calls are allowed")
    return tree.body


@lru_cache(maxsize=None)
def expression_names(text: str) -> FrozenSet[str]:
    """Variable and constant names referenced by an expression."""
    node = parse_expression(text)
    callees = {id(n.func) for n in ast.walk(node) if isinstance(n, ast.Call)}
    return frozenset(
        n.id for n in ast.walk(node)
        if isinstance(n, ast.Name) and id(n) not in callees
    )


def evaluate_expression(text: str, env: Mapping[str, Any]) -> Any:
    return _eval(parse_expression(text), env)


def _eval(node: ast.expr, env: Mapping[str, Any]) -> Any:
    if isinstance(node, ast.Constant):
        return node.value
    if isinstance(node, ast.Name):
        if node.id not in env:
            raise NameError(f"'{node.id}' is not defined")
        return env[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        value = _eval(node.operand, env)
        if isinstance(node.op, ast.Not):
            return not value
        return -value if isinstance(node.op, ast.USub) else +value
    if isinstance(node, ast.BoolOp):
        if isinstance(node.op, ast.And):
            result = True
            for item in node.values:
                result = _eval(item, env)
                if not result:
                    return result
            return result
        result = False
        for item in node.values:
            result = _eval(item, env)
            if result:
                return result
        return result
    if isinstance(node, ast.Compare):
        left = _eval(node.left, env)
        for op, comparator in zip(node.ops, node.comparators):
            right = _eval(comparator, env)
            if not _COMPARES[type(op)](left, right):
                return False
            left = right
        return True
    if isinstance(node, ast.Call):
        return EXPR_BUILTINS[node.func.id](*[_eval(a, env) for a in node.args])
    raise ValueError(f"cannot evaluate {ast.dump(node)}")


# ============================================
# PARSER
# ============================================

_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"

_PATTERNS = {
    "program": re.compile(rf"^program\s+({_NAME})$"),
    "entry": re.compile(rf"^entry\s+({_NAME})$"),
    "const": re.compile(rf"^const\s+({_NAME})\s+({_NUMBER})$"),
    "api": re.compile(rf"^api\s+(sensor_read|actuation)\s+({_NAME})(?:\s+({_NAME}))?$"),
    "func": re.compile(rf"^func\s+({_NAME})\s*\(([^)]*)\)$"),
    "endfunc": re.compile(r"^endfunc$"),
    "block": re.compile(r"^block\s+(\d+)$"),
    "read_sensor": re.compile(rf"^read_sensor\s+({_NAME})\s+({_NAME})$"),
    "assign": re.compile(rf"^assign\s+({_NAME})\s+(.+)$"),
    "call": re.compile(rf"^call\s+(?:({_NAME})\s*=\s*)?({_NAME})\s*\((.*)\)$"),
    "actuate": re.compile(rf"^actuate\s+({_NAME})\s*\((.*)\)$"),
    "syscall": re.compile(rf"^syscall\s+({_NAME})\s+(0x[0-9A-Fa-f]+)$"),
    "br": re.compile(rf"^br\s+({_NAME})\s+(\d+)\s+(\d+)$"),
    "jmp": re.compile(r"^jmp\s+(\d+)$"),
    "ret": re.compile(rf"^ret(?:\s+({_NAME}))?$"),
}

_TERMINATORS = ("br", "jmp", "ret")
_INSTRUCTIONS = ("read_sensor", "assign", "call", "actuate", "syscall")


def _number(text: str) -> float:
    try:
        return int(text)
    except ValueError:
        return float(text)


class _FunctionBuilder:
    def __init__(self, name: str, params: Tuple[str, ...], line: int):
        self.name = name
        self.params = params
        self.line = line
        self.blocks: List[BasicBlock] = []
        self.block_id: Optional[int] = None
        self.block_line = line
        self.instrs: List[Instruction] = []
        self.terminator: Optional[Terminator] = None

    def open_block(self, block_id: int, line: int) -> None:
        if self.block_id is not None:
            if self.terminator is None:
                # Fall through to the block that follows
                self.terminator = Terminator(TermKind.JMP, line, target=block_id, implicit=True)
            self._close()
        self.block_id = block_id
        self.block_line = line

    def add(self, item, line: int) -> None:
        if self.block_id is None:
            self.open_block(0, line)
        if self.terminator is not None:
            raise IRSyntaxError(f"block {self.block_id} already terminated; start a new block", line, 1)
        if isinstance(item, Terminator):
            self.terminator = item
        else:
            self.instrs.append(item)

    def _close(self) -> None:
        self.blocks.append(BasicBlock(self.block_id, tuple(self.instrs), self.terminator, self.block_line))
        self.block_id = None
        self.instrs = []
        self.terminator = None

    def finish(self, line: int) -> Function:
        if self.block_id is None and not self.blocks:
            raise IRSyntaxError(f"function '{self.name}' has no body", line, 1)
        if self.block_id is not None:
            if self.terminator is None:
                raise IRSyntaxError(f"block {self.block_id} of '{self.name}' has no terminator", line, 1)
            self._close()
        return Function(self.name, self.params, tuple(self.blocks), self.line)


class _Parser:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.name = "anonymous"
        self.entry: Optional[Tuple[str, int]] = None
        self.constants: Dict[str, float] = {}
        self.apis: Dict[str, ApiDecl] = {}
        self.functions: List[Function] = []
        self.current: Optional[_FunctionBuilder] = None

    def column(self, line: int, token: str) -> int:
        raw = self.lines[line - 1]
        pos = raw.find(token)
        return pos + 1 if pos >= 0 else 1

    def expression(self, text: str, line: int) -> str:
        try:
            node = parse_expression(text)
        except (SyntaxError, ValueError) as e:
            raise IRSyntaxError(f"bad expression '{text.strip()}': {e}", line, self.column(line, text.strip()))
        return ast.unparse(node)

    def arguments(self, text: str, line: int) -> Tuple[str, ...]:
        if not text.strip():
            return ()
        try:
            call = ast.parse(f"f({text})", mode="eval").body
        except SyntaxError as e:
            raise IRSyntaxError(f"bad argument list '{text}': {e}", line, self.column(line, text))
        if call.keywords:
            raise IRSyntaxError("keyword arguments are not supported", line, self.column(line, text))
        return tuple(self.expression(ast.unparse(arg), line) for arg in call.args)

    def parse(self) -> Program:
        for lineno, raw in enumerate(self.lines, 1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            keyword = text.split()[0]
            pattern = _PATTERNS.get(keyword)
            match = pattern.match(text) if pattern else None
            if match is None:
                column = raw.find(keyword) + 1
                if pattern is None:
                    raise IRSyntaxError(f"unknown keyword '{keyword}'", lineno, column)
                raise IRSyntaxError(f"malformed '{keyword}' line", lineno, column)
            self.handle(keyword, match, lineno)

        if self.current is not None:
            raise IRSyntaxError(f"function '{self.current.name}' is missing endfunc", len(self.lines), 1)
        return self.validate()

    def handle(self, keyword: str, m: re.Match, line: int) -> None:
        inside = self.current is not None
        if keyword in ("program", "entry", "const", "api", "func") and inside:
            raise IRSyntaxError(f"'{keyword}' is not allowed inside a function", line, 1)
        if keyword in ("block", "endfunc") + _TERMINATORS + _INSTRUCTIONS and not inside:
            raise IRSyntaxError(f"'{keyword}' outside of a function", line, 1)

        if keyword == "program":
            self.name = m.group(1)
        elif keyword == "entry":
            self.entry = (m.group(1), line)
        elif keyword == "const":
            self.constants[m.group(1)] = _number(m.group(2))
        elif keyword == "api":
            kind = ApiKind(m.group(1))
            name = m.group(2)
            if name in self.apis:
                raise IRSyntaxError(f"api '{name}' declared twice", line, self.column(line, name))
            sensor = None
            if kind == ApiKind.SENSOR_READ:
                sensor = m.group(3) or (name[5:] if name.startswith("read_") and len(name) > 5 else name)
            elif m.group(3):
                raise IRSyntaxError("only sensor_read apis name a sensor", line, self.column(line, m.group(3)))
            self.apis[name] = ApiDecl(name, kind, sensor)
        elif keyword == "func":
            params = tuple(p.strip() for p in m.group(2).split(",") if p.strip())
            for p in params:
                if not re.fullmatch(_NAME, p):
                    raise IRSyntaxError(f"bad parameter name '{p}'", line, self.column(line, p))
            self.current = _FunctionBuilder(m.group(1), params, line)
        elif keyword == "endfunc":
            self.functions.append(self.current.finish(line))
            self.current = None
        elif keyword == "block":
            self.current.open_block(int(m.group(1)), line)
        elif keyword == "read_sensor":
            self.current.add(Instruction(InstrKind.READ_SENSOR, line, dst=m.group(1), api=m.group(2)), line)
        elif keyword == "assign":
            self.current.add(
                Instruction(InstrKind.ASSIGN, line, dst=m.group(1), expr=self.expression(m.group(2), line)), line
            )
        elif keyword == "call":
            self.current.add(
                Instruction(InstrKind.CALL, line, dst=m.group(1), fn=m.group(2),
                            args=self.arguments(m.group(3), line)), line
            )
        elif keyword == "actuate":
            self.current.add(
                Instruction(InstrKind.ACTUATE, line, api=m.group(1), args=self.arguments(m.group(2), line)), line
            )
        elif keyword == "syscall":
            self.current.add(Instruction(InstrKind.SYSCALL, line, name=m.group(1), pc=int(m.group(2), 16)), line)
        elif keyword == "br":
            t, f = int(m.group(2)), int(m.group(3))
            if t == f:
                raise IRSyntaxError("branch targets must differ", line, self.column(line, m.group(3)))
            self.current.add(Terminator(TermKind.BR, line, cond=m.group(1), true_target=t, false_target=f), line)
        elif keyword == "jmp":
            self.current.add(Terminator(TermKind.JMP, line, target=int(m.group(1))), line)
        elif keyword == "ret":
            self.current.add(Terminator(TermKind.RET, line, value=m.group(1)), line)

    def validate(self) -> Program:
        if not self.functions:
            raise IRSyntaxError("program declares no functions", max(len(self.lines), 1), 1)

        names: Dict[str, Function] = {}
        for fn in self.functions:
            if fn.name in names:
                raise IRSyntaxError(f"function '{fn.name}' defined twice", fn.line, self.column(fn.line, fn.name))
            names[fn.name] = fn

        pcs: Dict[int, int] = {}
        calls = nx.DiGraph()
        calls.add_nodes_from(names)
        for fn in self.functions:
            self._validate_function(fn, names, pcs, calls)

        try:
            cycle = nx.find_cycle(calls)
        except nx.NetworkXNoCycle:
            cycle = None
        if cycle:
            chain = " -> ".join([u for u, _ in cycle] + [cycle[0][0]])
            raise IRError(f"recursive calls are not supported ({chain})")

        if self.entry is not None:
            entry, line = self.entry
            if entry not in names:
                raise UndeclaredNameError(f"entry function '{entry}' is not defined", line, self.column(line, entry))
        else:
            entry = "main" if "main" in names else self.functions[0].name

        return Program(
            name=self.name,
            functions=tuple(self.functions),
            entry=entry,
            api_decls=tuple(self.apis.values()),
            constants=tuple(self.constants.items()),
        )

    def _validate_function(self, fn: Function, names, pcs, calls) -> None:
        block_ids: Set[int] = set()
        for block in fn.blocks:
            if block.id in block_ids:
                raise IRSyntaxError(f"duplicate block {block.id} in '{fn.name}'", block.line, 1)
            block_ids.add(block.id)

        defined = set(fn.params) | set(self.constants)
        for block in fn.blocks:
            for instr in block.instrs:
                if instr.dst:
                    defined.add(instr.dst)

        for block in fn.blocks:
            for target, _ in block.terminator.successors():
                if target not in block_ids:
                    line = block.terminator.line
                    raise DanglingTargetError(
                        f"branch target block {target} does not exist in '{fn.name}'",
                        line, self.column(line, str(target)),
                    )
                if target == fn.entry:
                    raise IRSyntaxError(
                        f"entry block {target} of '{fn.name}' must not have predecessors",
                        block.terminator.line, 1,
                    )

            for instr in block.instrs:
                line = instr.line
                if instr.kind in (InstrKind.READ_SENSOR, InstrKind.ACTUATE):
                    decl = self.apis.get(instr.api)
                    wanted = ApiKind.SENSOR_READ if instr.kind == InstrKind.READ_SENSOR else ApiKind.ACTUATION
                    if decl is None or decl.kind != wanted:
                        raise UndeclaredNameError(
                            f"'{instr.api}' is not a declared {wanted.value} api",
                            line, self.column(line, instr.api),
                        )
                elif instr.kind == InstrKind.CALL:
                    callee = names.get(instr.fn)
                    if callee is None:
                        raise UndeclaredNameError(f"call to undefined function '{instr.fn}'",
                                                  line, self.column(line, instr.fn))
                    if len(callee.params) != len(instr.args):
                        raise IRSyntaxError(
                            f"'{instr.fn}' takes {len(callee.params)} arguments, got {len(instr.args)}",
                            line, self.column(line, instr.fn),
                        )
                    calls.add_edge(fn.name, instr.fn)
                elif instr.kind == InstrKind.SYSCALL:
                    if instr.pc in pcs:
                        raise DuplicatePCError(
                            f"pc 0x{instr.pc:x} already used on line {pcs[instr.pc]}",
                            line, self.column(line, "0x"),
                        )
                    pcs[instr.pc] = line

                for var in sorted(instr.uses(self.constants)):
                    if var not in defined:
                        raise UndefinedVariableError(f"undefined variable '{var}'", line, self.column(line, var))

            for var in sorted(block.terminator.uses()):
                if var not in defined:
                    line = block.terminator.line
                    raise UndefinedVariableError(f"undefined variable '{var}'", line, self.column(line, var))


def parse_program(text: str) -> Program:
    """Parse IR source into a validated Program."""
    return _Parser(text).parse()


def load_program(path) -> Program:
    with open(path) as f:
        return parse_program(f.read())


# ============================================
# CFG AND DOMINANCE
# ============================================

@dataclass
class Cfg:
    """Per-function control-flow graph over block ids."""
    function: str
    graph: nx.DiGraph
    entry: int
    is_entry: bool = False

    def label(self, src: int, dst: int) -> str:
        return self.graph.edges[src, dst]["label"]

    def successors(self, block: int) -> List[int]:
        return list(self.graph.successors(block))


def build_cfg(fn: Function, is_entry: bool = False) -> Cfg:
    graph = nx.DiGraph()
    for block in fn.blocks:
        graph.add_node(block.id)
    for block in fn.blocks:
        for target, label in block.terminator.successors():
            graph.add_edge(block.id, target, label=label)
    return Cfg(fn.name, graph, fn.entry, is_entry)


def build_cfgs(program: Program) -> Dict[str, Cfg]:
    return {fn.name: build_cfg(fn, fn.name == program.entry) for fn in program.functions}


@dataclass
class Dominance:
    """Immediate dominators and post-dominators of the reachable blocks."""
    entry: int
    idom: Dict[int, int]
    ipdom: Dict[int, int]
    unreachable: FrozenSet[int]

    def dominates(self, a: int, b: int) -> bool:
        node = b
        while True:
            if node == a:
                return True
            if node not in self.idom:
                return False
            node = self.idom[node]

    def post_dominates(self, a: int, b: int) -> bool:
        node = b
        while True:
            if node == a:
                return True
            if node not in self.ipdom:
                return False
            node = self.ipdom[node]

    def dominators(self, block: int) -> List[int]:
        chain = [block]
        while chain[-1] in self.idom:
            chain.append(self.idom[chain[-1]])
        return chain


def compute_dominance(cfg: Cfg) -> Dominance:
    """
    Dominator and post-dominator trees.

    Blocks that cannot reach a `ret` (e.g. an endless scan loop) are tied to
    the virtual exit from the highest block of each terminal SCC.
    """
    graph = cfg.graph
    reachable = {cfg.entry} | nx.descendants(graph, cfg.entry)
    unreachable = frozenset(set(graph) - reachable)
    if unreachable:
        logger.warning("%s: unreachable blocks %s excluded", cfg.function, sorted(unreachable))

    sub = graph.subgraph(reachable)
    idom = dict(nx.immediate_dominators(sub, cfg.entry))
    idom.pop(cfg.entry, None)

    post = nx.DiGraph()
    post.add_nodes_from(reachable)
    post.add_node(EXIT)
    post.add_edges_from(sub.edges())
    for block in reachable:
        if graph.out_degree(block) == 0:
            post.add_edge(block, EXIT)

    stuck = reachable - nx.ancestors(post, EXIT)
    while stuck:
        condensed = nx.condensation(post.subgraph(stuck))
        for scc in condensed.nodes:
            if condensed.out_degree(scc) == 0:
                post.add_edge(max(condensed.nodes[scc]["members"]), EXIT)
        stuck = reachable - nx.ancestors(post, EXIT)

    ipdom = dict(nx.immediate_dominators(post.reverse(copy=True), EXIT))
    ipdom.pop(EXIT, None)
    return Dominance(cfg.entry, idom, ipdom, unreachable)


# ============================================
# LOOPS
# ============================================

@dataclass(frozen=True)
class Loop:
    function: str
    header: int
    body: FrozenSet[int]
    back_edges: Tuple[Tuple[int, int], ...]
    parent: Optional[int] = None
    top_level: bool = False

    @property
    def loop_id(self) -> str:
        return f"{self.function}:{self.header}"

    @property
    def back_edge(self) -> Tuple[int, int]:
        return self.back_edges[0]

    def exit_edges(self, cfg: Cfg) -> List[Tuple[int, int]]:
        return sorted((u, v) for u in self.body for v in cfg.graph.successors(u) if v not in self.body)


@dataclass(frozen=True)
class LoopInfo:
    function: str
    loops: Tuple[Loop, ...]

    def by_header(self, header: int) -> Optional[Loop]:
        for loop in self.loops:
            if loop.header == header:
                return loop
        return None

    def innermost(self, block: int) -> Optional[Loop]:
        found = [loop for loop in self.loops if block in loop.body]
        return min(found, key=lambda l: len(l.body)) if found else None

    @property
    def top_level_loops(self) -> List[Loop]:
        return [loop for loop in self.loops if loop.top_level]


def find_loops(cfg: Cfg, dominance: Dominance) -> LoopInfo:
    """Natural loops from back edges, merged per header, with nesting resolved."""
    reachable = set(cfg.graph) - dominance.unreachable
    sub = cfg.graph.subgraph(reachable)

    back_edges = sorted((t, h) for t, h in sub.edges() if dominance.dominates(h, t))
    forward = nx.DiGraph(sub)
    forward.remove_edges_from(back_edges)
    if not nx.is_directed_acyclic_graph(forward):
        cycle = nx.find_cycle(forward)
        raise IrreducibleCFGError(
            f"irreducible control flow in '{cfg.function}' around blocks {sorted({u for u, _ in cycle})}"
        )

    bodies: Dict[int, Set[int]] = {}
    edges: Dict[int, List[Tuple[int, int]]] = {}
    for tail, header in back_edges:
        body = bodies.setdefault(header, {header})
        edges.setdefault(header, []).append((tail, header))
        stack = [tail]
        while stack:
            node = stack.pop()
            if node in body:
                continue
            body.add(node)
            stack.extend(sub.predecessors(node))

    headers = sorted(bodies)
    parents: Dict[int, Optional[int]] = {}
    for h in headers:
        enclosing = [o for o in headers if o != h and h in bodies[o]]
        parents[h] = min(enclosing, key=lambda o: len(bodies[o])) if enclosing else None

    loops = []
    for h in headers:
        parent = headers.index(parents[h]) if parents[h] is not None else None
        loops.append(Loop(
            function=cfg.function,
            header=h,
            body=frozenset(bodies[h]),
            back_edges=tuple(edges[h]),
            parent=parent,
            top_level=cfg.is_entry and parent is None,
        ))
    return LoopInfo(cfg.function, tuple(loops))


# ============================================
# PROGRAM DEPENDENCE GRAPH
# ============================================

@dataclass
class Pdg:
    """
    Program dependence graph.

    data_deps: def -> use edges between Sites, including call argument ->
    callee parameter and callee `ret` -> call site transfers.
    ctrl_deps: (function, block) -> (function, block) edges keyed by the
    branch label ("true" / "false") under which the target runs.
    """
    data_deps: nx.DiGraph
    ctrl_deps: nx.MultiDiGraph
    cfgs: Dict[str, Cfg]
    dominance: Dict[str, Dominance]

    def backward_slice(self, site: Site) -> Set[Site]:
        return nx.ancestors(self.data_deps, site)

    def control_dependents(self, node: Tuple[str, int], label: str) -> Set[Tuple[str, int]]:
        """Blocks transitively control-dependent on `node` through its `label` edge."""
        direct = {v for _, v, key in self.ctrl_deps.out_edges(node, keys=True) if key == label}
        result = set(direct)
        for v in direct:
            result |= nx.descendants(self.ctrl_deps, v)
        return result

    def canonical(self) -> Tuple[tuple, tuple]:
        data = tuple(sorted(self.data_deps.edges()))
        ctrl = tuple(sorted(self.ctrl_deps.edges(keys=True)))
        return data, ctrl


def site_item(program: Program, site: Site):
    """Instruction or terminator at a site (None for parameter sites)."""
    if site.block == PARAM_BLOCK:
        return None
    block = program.function(site.function).block(site.block)
    if site.index == len(block.instrs):
        return block.terminator
    return block.instrs[site.index]


def _reaching_definitions(fn: Function, cfg: Cfg, dom: Dominance) -> Dict[int, Dict[str, FrozenSet[Site]]]:
    params = {p: frozenset({Site(fn.name, PARAM_BLOCK, i)}) for i, p in enumerate(fn.params)}
    blocks = fn.block_map()
    order = [b.id for b in fn.blocks if b.id not in dom.unreachable]
    entering: Dict[int, Dict[str, FrozenSet[Site]]] = {}
    leaving: Dict[int, Dict[str, FrozenSet[Site]]] = {}

    changed = True
    while changed:
        changed = False
        for bid in order:
            state: Dict[str, FrozenSet[Site]] = dict(params) if bid == cfg.entry else {}
            for pred in cfg.graph.predecessors(bid):
                for var, sites in leaving.get(pred, {}).items():
                    state[var] = state.get(var, frozenset()) | sites
            entering[bid] = state
            out = dict(state)
            for index, instr in enumerate(blocks[bid].instrs):
                if instr.dst:
                    out[instr.dst] = frozenset({Site(fn.name, bid, index)})
            if leaving.get(bid) != out:
                leaving[bid] = out
                changed = True
    return entering


def build_pdg(program: Program, cfgs: Optional[Dict[str, Cfg]] = None,
              dominance: Optional[Dict[str, Dominance]] = None) -> Pdg:
    cfgs = cfgs or build_cfgs(program)
    dominance = dominance or {name: compute_dominance(cfg) for name, cfg in cfgs.items()}
    constants = program.constant_map()

    data = nx.DiGraph()
    ctrl = nx.MultiDiGraph()
    returns: Dict[str, List[Site]] = {}

    for fn in program.functions:
        for i, _ in enumerate(fn.params):
            data.add_node(Site(fn.name, PARAM_BLOCK, i))
        for block in fn.blocks:
            for index in range(len(block.instrs) + 1):
                data.add_node(Site(fn.name, block.id, index))
            if block.terminator.kind == TermKind.RET and block.terminator.value:
                returns.setdefault(fn.name, []).append(Site(fn.name, block.id, len(block.instrs)))

    for fn in program.functions:
        cfg, dom = cfgs[fn.name], dominance[fn.name]
        reaching = _reaching_definitions(fn, cfg, dom)
        for block in fn.blocks:
            if block.id in dom.unreachable:
                continue
            state = dict(reaching[block.id])
            for index, instr in enumerate(block.instrs):
                site = Site(fn.name, block.id, index)
                for var in sorted(instr.uses(constants)):
                    for d in state.get(var, ()):
                        data.add_edge(d, site)
                if instr.kind == InstrKind.CALL:
                    for i, _ in enumerate(instr.args):
                        data.add_edge(site, Site(instr.fn, PARAM_BLOCK, i))
                    if instr.dst:
                        for ret_site in returns.get(instr.fn, []):
                            data.add_edge(ret_site, site)
                if instr.dst:
                    state[instr.dst] = frozenset({site})
            term_site = Site(fn.name, block.id, len(block.instrs))
            for var in sorted(block.terminator.uses()):
                for d in state.get(var, ()):
                    data.add_edge(d, term_site)

        # Ferrante-style construction: walk the post-dominator tree from each
        # branch successor up to the branch's immediate post-dominator.
        for block in fn.blocks:
            if block.id not in dom.unreachable:
                ctrl.add_node((fn.name, block.id))
        for a, b, label in cfg.graph.edges(data="label"):
            if a in dom.unreachable or label not in ("true", "false"):
                continue
            stop = dom.ipdom.get(a, EXIT)
            runner = b
            while runner != stop and runner != EXIT:
                ctrl.add_edge((fn.name, a), (fn.name, runner), key=label)
                runner = dom.ipdom.get(runner, EXIT)

    return Pdg(data, ctrl, cfgs, dominance)


def find_program_loops(program: Program, cfgs: Dict[str, Cfg],
                       dominance: Dict[str, Dominance]) -> Dict[str, LoopInfo]:
    return {fn.name: find_loops(cfgs[fn.name], dominance[fn.name]) for fn in program.functions}
