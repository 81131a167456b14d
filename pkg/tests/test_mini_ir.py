"""
Tests for the IR parser and the static graphs built over it.
"""

import networkx as nx
import numpy as np
import pytest

from core.mini_ir import (
    EXIT,
    PARAM_BLOCK,
    Cfg,
    DanglingTargetError,
    DuplicatePCError,
    IRError,
    IRSyntaxError,
    IrreducibleCFGError,
    InstrKind,
    Site,
    TermKind,
    UndeclaredNameError,
    UndefinedVariableError,
    build_cfg,
    build_cfgs,
    build_pdg,
    compute_dominance,
    evaluate_expression,
    find_loops,
    find_program_loops,
    load_program,
    parse_expression,
    parse_program,
)


def _program(body: str, header: str = "api sensor_read read_level\napi actuation setPump\n") -> str:
    return header + body


def _random_graph(rng: np.random.Generator, size: int, density: float, acyclic: bool) -> nx.DiGraph:
    graph = nx.DiGraph()
    graph.add_nodes_from(range(size))
    for src in range(size):
        for dst in range(size):
            if src == dst or (acyclic and dst < src):
                continue
            if rng.random() < density:
                graph.add_edge(src, dst, label="fallthrough")
    return graph


class TestParser:
    """Test parse_program and load_program"""

    def test_bundled_program(self, syringe):
        """Test the syringe pump parses with its declarations"""
        assert syringe.name == "syringe_pump"
        assert syringe.entry == "loop"
        assert syringe.constant_map() == {"HUMIDITY_THRESHOLD": 40, "PULL_THRESHOLD": 25}
        assert syringe.sensor_apis == frozenset({"read_humidity"})
        assert syringe.actuation_apis == frozenset({"digitalWrite"})
        assert syringe.sensor_of("read_humidity") == "humidity"

    def test_entry_defaults_to_main(self, solard):
        """Test a program without an entry line starts at main"""
        assert solard.entry == "main"

    def test_syscall_sites(self, syringe):
        """Test every syscall site is listed once with its pc"""
        pcs = [instr.pc for _, instr in syringe.syscall_sites()]
        assert len(pcs) == len(set(pcs))
        assert 0x14 in pcs and 0x16c in pcs
        site, instr = next(iter(syringe.syscall_sites()))
        assert site == Site("loop", 0, 1)
        assert instr.name == "open"

    def test_implicit_fallthrough(self, nested):
        """Test a block without terminator falls through to the next block"""
        entry = nested.function("push_syringe").block(0)
        assert entry.terminator.kind == TermKind.JMP
        assert entry.terminator.target == 1
        assert entry.terminator.implicit

    def test_call_with_result(self, solard):
        """Test `call dst = fn()` records the destination"""
        instr = solard.function("main").block(2).instrs[2]
        assert instr.kind == InstrKind.CALL
        assert instr.dst == "crit"
        assert instr.fn == "CriticalTempsFound"

    def test_malformed_fixture(self, fixtures_dir):
        """Test identical branch targets report their line"""
        with pytest.raises(IRSyntaxError) as exc:
            load_program(fixtures_dir / "malformed.ir")
        assert exc.value.line == 8
        assert "branch targets must differ" in str(exc.value)
        assert str(exc.value).startswith("line 8, column")

    def test_unknown_keyword(self):
        """Test an unknown statement is rejected with its position"""
        with pytest.raises(IRSyntaxError) as exc:
            parse_program("func main()\n  loop forever\nendfunc\n")
        assert exc.value.line == 2
        assert exc.value.column == 3

    def test_duplicate_pc(self):
        """Test two syscalls may not share a pc"""
        source = _program(
            "func main()\nblock 0\n  syscall read 0x10\n  syscall write 0x10\n  ret\nendfunc\n"
        )
        with pytest.raises(DuplicatePCError) as exc:
            parse_program(source)
        assert exc.value.line == 6

    def test_dangling_target(self):
        """Test a jump to a missing block is rejected"""
        with pytest.raises(DanglingTargetError):
            parse_program("func main()\nblock 0\n  jmp 4\nendfunc\n")

    def test_undeclared_api(self):
        """Test reading through an undeclared api is rejected"""
        with pytest.raises(UndeclaredNameError):
            parse_program("func main()\n  read_sensor x read_flow\n  ret\nendfunc\n")

    def test_actuation_api_is_not_a_sensor(self):
        """Test read_sensor needs a sensor_read api"""
        with pytest.raises(UndeclaredNameError):
            parse_program(_program("func main()\n  read_sensor x setPump\n  ret\nendfunc\n"))

    def test_undefined_variable(self):
        """Test using a variable nothing defines is rejected"""
        with pytest.raises(UndefinedVariableError) as exc:
            parse_program("func main()\n  assign y x + 1\n  ret\nendfunc\n")
        assert "'x'" in str(exc.value)

    def test_undefined_function(self):
        """Test calling an unknown function is rejected"""
        with pytest.raises(UndeclaredNameError):
            parse_program("func main()\n  call helper()\n  ret\nendfunc\n")

    def test_wrong_arity(self):
        """Test argument counts must match"""
        source = "func f(a)\n  ret a\nendfunc\nfunc main()\n  call f()\n  ret\nendfunc\n"
        with pytest.raises(IRSyntaxError):
            parse_program(source)

    def test_recursion_rejected(self):
        """Test recursive call chains are rejected"""
        source = "func a()\n  call b()\n  ret\nendfunc\nfunc b()\n  call a()\n  ret\nendfunc\n"
        with pytest.raises(IRError) as exc:
            parse_program(source)
        assert "recursive" in str(exc.value)

    def test_entry_block_not_a_target(self):
        """Test the entry block may not be jumped to"""
        with pytest.raises(IRSyntaxError):
            parse_program("func main()\nblock 0\n  assign x 1\n  jmp 0\nendfunc\n")

    def test_missing_endfunc(self):
        """Test an unterminated function is reported"""
        with pytest.raises(IRSyntaxError):
            parse_program("func main()\n  ret\n")

    def test_bad_expression(self):
        """Test expressions outside the allowed subset are rejected"""
        with pytest.raises(IRSyntaxError):
            parse_program("func main()\n  assign x [1, 2]\n  ret\nendfunc\n")

    def test_with_constants(self, syringe):
        """Test constant overrides replace values and reject unknown names"""
        changed = syringe.with_constants({"HUMIDITY_THRESHOLD": 30})
        assert changed.constant_map()["HUMIDITY_THRESHOLD"] == 30
        assert syringe.constant_map()["HUMIDITY_THRESHOLD"] == 40
        with pytest.raises(IRError):
            syringe.with_constants({"X": 1})


class TestExpressions:
    """Test the restricted expression language"""

    def test_arithmetic_and_builtins(self):
        """Test arithmetic, comparisons and builtin calls"""
        env = {"h": 47.5, "T": 40}
        assert evaluate_expression("int(h - T)", env) == 7
        assert evaluate_expression("h > T and h < 50", env) is True
        assert evaluate_expression("1 < h < 40", env) is False
        assert evaluate_expression("max(h, 60) // 7", env) == 8

    def test_undefined_name(self):
        """Test evaluating an unbound name raises NameError"""
        with pytest.raises(NameError):
            evaluate_expression("x + 1", {})

    def test_attribute_access_rejected(self):
        """Test attribute access is not allowed"""
        with pytest.raises(ValueError):
            parse_expression("h.real")

    def test_foreign_call_rejected(self):
        """Test only the builtin functions may be called"""
        with pytest.raises(ValueError):
            parse_expression("open(1)")


class TestCfgAndDominance:
    """Test CFG, dominator and post-dominator construction"""

    def test_edge_labels(self, syringe):
        """Test branch edges carry their labels"""
        cfg = build_cfg(syringe.function("control_step"))
        assert cfg.label(0, 3) == "true"
        assert cfg.label(0, 4) == "false"
        assert cfg.label(3, 10) == "fallthrough"
        assert sorted(cfg.successors(4)) == [7, 9]

    def test_dominators(self, syringe):
        """Test the branch block dominates both arms and the join"""
        dom = compute_dominance(build_cfg(syringe.function("control_step")))
        assert dom.dominates(0, 7)
        assert dom.dominates(4, 9)
        assert not dom.dominates(3, 10)
        assert dom.dominators(7) == [7, 4, 0]

    def test_post_dominators(self, syringe):
        """Test the join block post-dominates the branches"""
        dom = compute_dominance(build_cfg(syringe.function("control_step")))
        assert dom.post_dominates(10, 0)
        assert dom.post_dominates(10, 7)
        assert not dom.post_dominates(3, 0)
        assert dom.ipdom[10] == EXIT

    def test_endless_loop_post_dominance(self):
        """Test a loop that never returns is still tied to the exit"""
        program = parse_program(
            "func main()\nblock 0\n  syscall open 0x1\n  jmp 1\nblock 1\n  syscall read 0x2\n  jmp 1\nendfunc\n"
        )
        dom = compute_dominance(build_cfg(program.function("main"), True))
        assert dom.post_dominates(1, 0)

    def test_unreachable_blocks(self):
        """Test blocks with no path from the entry are reported"""
        program = parse_program("func main()\nblock 0\n  ret\nblock 5\n  ret\nendfunc\n")
        dom = compute_dominance(build_cfg(program.function("main")))
        assert dom.unreachable == frozenset({5})

    def test_dominators_match_path_removal(self):
        """Test dominance against deleting a block on random graphs"""
        rng = np.random.default_rng(7)
        for _ in range(40):
            graph = _random_graph(rng, 8, 0.25, acyclic=False)
            dom = compute_dominance(Cfg("main", graph, 0))
            reachable = {0} | nx.descendants(graph, 0)
            for a in reachable:
                rest = graph.subgraph(set(graph) - {a})
                cut = set() if a == 0 else {0} | nx.descendants(rest, 0)
                for b in reachable:
                    assert dom.dominates(a, b) == (a == b or b not in cut)

    def test_post_dominators_match_path_removal(self):
        """Test post-dominance against deleting a block on random acyclic graphs"""
        rng = np.random.default_rng(11)
        for _ in range(40):
            graph = _random_graph(rng, 8, 0.3, acyclic=True)
            dom = compute_dominance(Cfg("main", graph, 0))
            reachable = {0} | nx.descendants(graph, 0)
            exits = {n for n in reachable if graph.out_degree(n) == 0}
            for a in reachable:
                rest = graph.subgraph(reachable - {a})
                for b in reachable - {a}:
                    escapes = bool(({b} | nx.descendants(rest, b)) & exits)
                    assert dom.post_dominates(a, b) == (not escapes)


class TestLoops:
    """Test natural loop detection"""

    def test_scan_loop(self, syringe):
        """Test the entry function's scan loop is top level"""
        cfgs = build_cfgs(syringe)
        loops = find_loops(cfgs["loop"], compute_dominance(cfgs["loop"]))
        scan = loops.by_header(1)
        assert scan.loop_id == "loop:1"
        assert scan.body == frozenset({1, 2})
        assert scan.back_edge == (2, 1)
        assert scan.top_level
        assert scan.exit_edges(cfgs["loop"]) == [(1, 3)]
        assert loops.top_level_loops == [scan]

    def test_callee_loops_not_top_level(self, syringe):
        """Test loops outside the entry function are never scan loops"""
        cfgs = build_cfgs(syringe)
        loops = find_program_loops(syringe, cfgs, {n: compute_dominance(c) for n, c in cfgs.items()})
        push = loops["push_syringe"].by_header(1)
        assert push.body == frozenset({1, 2})
        assert not push.top_level
        assert loops["push_syringe"].innermost(2) == push
        assert loops["control_step"].loops == ()

    def test_do_while_loop(self, nested):
        """Test a self loop is found"""
        cfg = build_cfgs(nested)["push_syringe"]
        loop = find_loops(cfg, compute_dominance(cfg)).by_header(1)
        assert loop.back_edges == ((1, 1),)

    def test_nested_loops(self):
        """Test an inner loop records its parent"""
        program = parse_program(
            "func main()\nblock 0\n  assign i 0\n  jmp 1\nblock 1\n  assign a i < 3\n  br a 2 5\n"
            "block 2\n  assign j 0\n  jmp 3\nblock 3\n  assign b j < 2\n  br b 4 6\n"
            "block 4\n  assign j j + 1\n  jmp 3\nblock 6\n  assign i i + 1\n  jmp 1\n"
            "block 5\n  ret\nendfunc\n"
        )
        cfg = build_cfg(program.function("main"), True)
        loops = find_loops(cfg, compute_dominance(cfg))
        outer, inner = loops.by_header(1), loops.by_header(3)
        assert inner.body < outer.body
        assert loops.loops[inner.parent] == outer
        assert loops.innermost(4) == inner

    def test_irreducible(self):
        """Test a loop with two entries is rejected"""
        program = parse_program(
            "func main()\nblock 0\n  assign c 1\n  br c 1 2\nblock 1\n  jmp 2\nblock 2\n  br c 1 3\n"
            "block 3\n  ret\nendfunc\n"
        )
        cfg = build_cfg(program.function("main"))
        with pytest.raises(IrreducibleCFGError):
            find_loops(cfg, compute_dominance(cfg))


class TestPdg:
    """Test data and control dependences"""

    def test_control_dependence(self, syringe):
        """Test arms depend on their branch with its label"""
        pdg = build_pdg(syringe)
        assert pdg.control_dependents(("control_step", 0), "true") == {("control_step", 3)}
        assert pdg.control_dependents(("control_step", 0), "false") == {
            ("control_step", 4), ("control_step", 7), ("control_step", 9),
        }
        assert pdg.control_dependents(("control_step", 4), "true") == {("control_step", 7)}

    def test_join_is_independent(self, syringe):
        """Test the post-dominating join block has no control parent"""
        pdg = build_pdg(syringe)
        assert not list(pdg.ctrl_deps.in_edges(("control_step", 10)))

    def test_interprocedural_slice(self, syringe):
        """Test the branch on a parameter reaches the caller's sensor read"""
        pdg = build_pdg(syringe)
        branch = Site("control_step", 0, 1)
        sliced = pdg.backward_slice(branch)
        assert Site("control_step", PARAM_BLOCK, 0) in sliced
        assert Site("loop", 2, 4) in sliced

    def test_return_value_slice(self, solard):
        """Test a branch on a call result reaches the callee's read"""
        pdg = build_pdg(solard)
        sliced = pdg.backward_slice(Site("main", 2, 3))
        assert Site("CriticalTempsFound", 0, 0) in sliced

    def test_canonical_is_stable(self, nested):
        """Test two builds give the same canonical form"""
        assert build_pdg(nested).canonical() == build_pdg(nested).canonical()
