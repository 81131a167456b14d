"""
Tests for event identification and event-dependence annotation.
"""

import itertools

import networkx as nx
import numpy as np
import pytest

from core.event_analysis import (
    AnalysisError,
    CompositeEvent,
    EventKind,
    EventLiteral,
    EventSpec,
    Predicate,
    analyze_event_dependence,
    analyze_program,
    annotations_from_dict,
    annotations_to_dict,
    format_report,
    load_annotations,
    save_annotations,
    simplify_alternatives,
)
from core.mini_ir import build_pdg, load_program, parse_program


def _lits(text: str):
    return frozenset(EventLiteral.parse(p) for p in text.split("&"))


class TestPredicate:
    """Test threshold predicates"""

    def test_evaluate_and_negate(self):
        """Test evaluation and its complement"""
        p = Predicate("humidity", ">", 40.0)
        assert p.evaluate(48.56)
        assert not p.evaluate(40.0)
        assert p.negated() == Predicate("humidity", "<=", 40.0)
        assert p.negated().evaluate(40.0)
        assert str(p) == "humidity > 40"


class TestCompositeEvent:
    """Test composite event parsing and ordering"""

    def test_literals_sorted(self):
        """Test literals are ordered by event number"""
        c = CompositeEvent.parse("E2 & !E1")
        assert str(c) == "!E1 & E2"
        assert c.to_list() == ["!E1", "E2"]

    def test_unconditional(self):
        """Test the empty conjunction"""
        assert CompositeEvent.parse("true").unconditional
        assert str(CompositeEvent(())) == "true"

    def test_repeated_event_rejected(self):
        """Test an event may appear only once in a conjunction"""
        with pytest.raises(AnalysisError):
            CompositeEvent.parse("E1 & !E1")


class TestSimplify:
    """Test any-of simplification"""

    def test_complementary_pair_merges(self):
        """Test a & x | a & !x reduces to a"""
        result = simplify_alternatives({_lits("E1 & E2"), _lits("E1 & !E2")})
        assert result == {_lits("E1")}

    def test_absorption(self):
        """Test a | a & b reduces to a"""
        result = simplify_alternatives({_lits("E1"), _lits("E1 & E3")})
        assert result == {_lits("E1")}

    def test_tautology(self):
        """Test x | !x reduces to the empty conjunction"""
        assert simplify_alternatives({_lits("E1"), _lits("!E1")}) == {frozenset()}


class TestBinaryEvents:
    """Test binary event identification"""

    def test_syringe_events(self, syringe_analysis):
        """Test both humidity branches are events with predicates"""
        binary = syringe_analysis.annotated.binary_events
        assert [e.id for e in binary] == ["E1", "E2"]
        e1, e2 = binary
        assert (e1.function, e1.block) == ("control_step", 0)
        assert e1.predicate == Predicate("humidity", ">", 40.0)
        assert e1.sensors == ("humidity",)
        assert e1.actuation_apis == ("digitalWrite",)
        assert (e2.function, e2.block) == ("control_step", 4)
        assert e2.predicate == Predicate("humidity", "<", 25.0)
        assert e2.action_labels == ("true",)
        assert e2.implicit_label == "false"

    def test_scan_loop_is_not_an_event(self, syringe_analysis):
        """Test the scan-loop condition is not sensor driven"""
        anchors = {e.anchor for e in syringe_analysis.events}
        assert ("loop", 1) not in anchors

    def test_predicate_through_call_return(self, solard_analysis):
        """Test a condition returned by a helper resolves to the helper's comparison"""
        e1, e2 = solard_analysis.annotated.binary_events
        assert (e1.function, e1.block) == ("main", 2)
        assert e1.predicate == Predicate("temperature", ">", 60.0)
        assert e2.predicate == Predicate("temperature", "<", 50.0)
        assert e1.actuation_apis == ("setHeater",)

    def test_constant_override_changes_threshold(self, syringe):
        """Test predicates follow overridden constants"""
        analysis = analyze_program(syringe.with_constants({"HUMIDITY_THRESHOLD": 30}))
        assert analysis.annotated.event("E1").predicate.threshold == 30.0

    def test_branch_without_action(self):
        """Test a sensor branch with no actuation on either side is not an event"""
        program = parse_program(
            "api sensor_read read_level\napi actuation setPump\n"
            "func main()\nblock 0\n  assign r 1\n  jmp 1\nblock 1\n  br r 2 5\n"
            "block 2\n  read_sensor x read_level\n  assign hi x > 3\n  br hi 3 4\n"
            "block 3\n  syscall write 0x1\n  jmp 4\nblock 4\n  syscall nanosleep 0x2\n  jmp 1\n"
            "block 5\n  ret\nendfunc\n"
        )
        assert analyze_program(program).events == ()

    def test_eventless_program(self, programs_dir):
        """Test an unconditional actuation yields no events"""
        analysis = analyze_program(load_program(programs_dir / "eventless.ir"))
        assert analysis.events == ()
        assert analysis.annotated.block_annotations == {}

    def test_unsupported_predicate(self, caplog):
        """Test a non-threshold condition is still an event, without a predicate"""
        program = parse_program(
            "api sensor_read read_level\napi sensor_read read_flow\napi actuation setPump\n"
            "func main()\nblock 0\n  assign r 1\n  jmp 1\nblock 1\n  br r 2 5\n"
            "block 2\n  read_sensor x read_level\n  read_sensor y read_flow\n  assign hi x > y\n  br hi 3 4\n"
            "block 3\n  actuate setPump(1)\n  jmp 4\nblock 4\n  syscall nanosleep 0x2\n  jmp 1\n"
            "block 5\n  ret\nendfunc\n"
        )
        events = analyze_program(program).events
        assert len(events) == 1
        assert events[0].predicate is None
        assert events[0].sensors == ("flow", "level")
        assert "cannot be verified" in caplog.text


class TestControlIntensityEvents:
    """Test control-intensity loop identification"""

    def test_push_loop(self, syringe_analysis):
        """Test the sensor-bounded push loop is the only intensity event"""
        loops = syringe_analysis.annotated.intensity_events
        assert len(loops) == 1
        l1 = loops[0]
        assert l1.id == "L1"
        assert l1.kind == EventKind.CONTROL_INTENSITY
        assert l1.loop_id == "push_syringe:1"
        assert l1.sensors == ("humidity",)
        assert l1.actuation_apis == ("digitalWrite",)
        assert syringe_analysis.annotated.loop_annotations["push_syringe:1"] == l1

    def test_fixed_count_loop_is_not_an_event(self, syringe_analysis, nested_analysis):
        """Test loops bounded by constants are skipped"""
        loop_ids = {e.loop_id for e in syringe_analysis.annotated.intensity_events}
        assert "pull_syringe:1" not in loop_ids
        assert nested_analysis.annotated.intensity_events == []


class TestEventDependence:
    """Test composite-event annotation of event-triggered blocks"""

    def test_nested_annotations(self, nested_analysis):
        """Test nested branches produce conjunctions of literals"""
        blocks = nested_analysis.annotated.block_annotations
        assert [str(c) for c in blocks[("loop", 3)]] == ["E1"]
        assert [str(c) for c in blocks[("loop", 7)]] == ["!E1 & E2"]
        assert [str(c) for c in blocks[("loop", 9)]] == ["!E1 & !E2"]

    def test_anchor_and_join_unannotated(self, nested_analysis):
        """Test event anchors and post-dominating joins carry no annotation"""
        blocks = nested_analysis.annotated.block_annotations
        assert ("loop", 4) not in blocks
        assert ("loop", 10) not in blocks
        assert ("main", 2) not in blocks

    def test_solard_annotations(self, solard_analysis):
        """Test the heater arms are annotated"""
        blocks = solard_analysis.annotated.block_annotations
        assert [str(c) for c in blocks[("main", 3)]] == ["E1"]
        assert [str(c) for c in blocks[("main", 5)]] == ["!E1 & E2"]
        assert [str(c) for c in blocks[("main", 6)]] == ["!E1 & !E2"]

    def test_disjunctive_block(self):
        """Test a block reached from two event arms depends on any of them"""
        program = parse_program(
            "api sensor_read read_a\napi sensor_read read_b\napi actuation setPump\n"
            "func main()\nblock 0\n  assign r 1\n  jmp 1\nblock 1\n  br r 2 9\n"
            "block 2\n  read_sensor a read_a\n  read_sensor b read_b\n  assign ha a > 1\n  br ha 3 4\n"
            "block 3\n  actuate setPump(1)\n  jmp 6\n"
            "block 4\n  assign hb b > 2\n  br hb 5 8\n"
            "block 5\n  actuate setPump(2)\n  jmp 6\n"
            "block 6\n  syscall write 0x1\n  jmp 8\n"
            "block 8\n  syscall nanosleep 0x2\n  jmp 1\n"
            "block 9\n  ret\nendfunc\n"
        )
        analysis = analyze_program(program)
        alternatives = analysis.annotated.block_annotations[("main", 6)]
        assert [str(c) for c in alternatives] == ["E1", "!E1 & E2"]
        assert analysis.annotated.disjunctive_blocks == [("main", 6)]

    def test_direct_query(self, nested_analysis):
        """Test analyze_event_dependence on a single block"""
        result = analyze_event_dependence(
            ("loop", 7), nested_analysis.pdg.ctrl_deps, nested_analysis.events
        )
        assert [str(c) for c in result] == ["!E1 & E2"]
        unconditional = analyze_event_dependence(
            ("main", 2), nested_analysis.pdg.ctrl_deps, nested_analysis.events
        )
        assert unconditional[0].unconditional

    def test_branch_flip_inverts_literals(self, fixtures_dir):
        """Test swapping an event branch's targets inverts only its literals"""
        text = (fixtures_dir / "nested_events.ir").read_text()
        assert text.count("br push 3 4") == 1
        analysis = analyze_program(parse_program(text.replace("br push 3 4", "br push 4 3")))
        blocks = analysis.annotated.block_annotations
        assert [str(c) for c in blocks[("loop", 3)]] == ["!E1"]
        assert [str(c) for c in blocks[("loop", 7)]] == ["E1 & E2"]
        assert [str(c) for c in blocks[("loop", 9)]] == ["E1 & !E2"]

    def test_cyclic_control_dependence(self):
        """Test mutually dependent loop branches terminate"""
        program = parse_program(
            "func main()\nblock 0\n  assign a 1\n  assign hot 0\n  jmp 1\n"
            "block 1\n  br a 2 9\nblock 2\n  br hot 3 9\nblock 3\n  jmp 1\nblock 9\n  ret\nendfunc\n"
        )
        ctrl = build_pdg(program).ctrl_deps
        assert ctrl.has_edge(("main", 1), ("main", 2))
        assert ctrl.has_edge(("main", 2), ("main", 1))
        events = _events([2])
        assert [str(c) for c in analyze_event_dependence(("main", 3), ctrl, events)] == ["E1"]
        assert analyze_event_dependence(("main", 2), ctrl, events)[0].unconditional


def _dag_blocks(rng: np.random.Generator, size: int):
    """Terminators of a random acyclic CFG; every jump goes forward."""
    blocks = []
    for i in range(size):
        if i == size - 1:
            blocks.append(("ret",))
        elif i + 2 < size and rng.random() < 0.6:
            t, f = rng.choice(np.arange(i + 1, size), size=2, replace=False)
            blocks.append(("br", int(t), int(f)))
        else:
            blocks.append(("jmp", int(rng.integers(i + 1, size))))
    return blocks


def _render(blocks, swapped=()) -> str:
    lines = ["func main()"]
    for i, term in enumerate(blocks):
        lines.append(f"block {i}")
        if i == 0:
            lines.append("  assign c 1")
        if term[0] == "br":
            t, f = (term[2], term[1]) if i in swapped else (term[1], term[2])
            lines.append(f"  br c {t} {f}")
        elif term[0] == "jmp":
            lines.append(f"  jmp {term[1]}")
        else:
            lines.append("  ret")
    lines.append("endfunc")
    return "\n".join(lines) + "\n"


def _events(anchors):
    return tuple(
        EventSpec(f"E{n}", EventKind.BINARY, "main", block, 0, (), (), ())
        for n, block in enumerate(anchors, 1)
    )


def _reached(blocks, target: int, outcome) -> bool:
    """Is `target` on some entry path where every event branch goes the chosen way?"""
    graph = nx.DiGraph()
    graph.add_nodes_from(range(len(blocks)))
    for i, term in enumerate(blocks):
        if term[0] == "br":
            if i in outcome:
                graph.add_edge(i, term[1] if outcome[i] else term[2])
            else:
                graph.add_edge(i, term[1])
                graph.add_edge(i, term[2])
        elif term[0] == "jmp":
            graph.add_edge(i, term[1])
    return nx.has_path(graph, 0, target)


def _holds(alternatives, truth) -> bool:
    return any(all(truth[l.event_id] == l.positive for l in c.literals) for c in alternatives)


class TestDependenceOracle:
    """Test event dependence against path enumeration on random acyclic CFGs"""

    def test_matches_path_enumeration(self):
        """Test annotations agree with every event outcome on 100 seeds"""
        for seed in range(100):
            rng = np.random.default_rng(seed)
            blocks = _dag_blocks(rng, int(rng.integers(4, 11)))
            chosen = [i for i, term in enumerate(blocks) if term[0] == "br" and rng.random() < 0.7]
            events = _events(chosen)
            ctrl = build_pdg(parse_program(_render(blocks))).ctrl_deps
            for block in range(len(blocks)):
                if ("main", block) not in ctrl:
                    continue
                result = analyze_event_dependence(("main", block), ctrl, events)
                for values in itertools.product((True, False), repeat=len(chosen)):
                    outcome = dict(zip(chosen, values))
                    truth = {e.id: outcome[e.block] for e in events}
                    assert _holds(result, truth) == _reached(blocks, block, outcome), (seed, block, outcome)

    def test_flip_is_local(self):
        """Test swapping one event branch negates that event's literals and nothing else"""
        for seed in range(30):
            rng = np.random.default_rng(1000 + seed)
            blocks = _dag_blocks(rng, int(rng.integers(5, 11)))
            chosen = [i for i, term in enumerate(blocks) if term[0] == "br"]
            if not chosen:
                continue
            events = _events(chosen)
            flipped = events[int(rng.integers(len(events)))]
            before = build_pdg(parse_program(_render(blocks))).ctrl_deps
            after = build_pdg(parse_program(_render(blocks, swapped={flipped.block}))).ctrl_deps
            for node in before:
                original = {
                    frozenset(l.negated() if l.event_id == flipped.id else l for l in c.literals)
                    for c in analyze_event_dependence(node, before, events)
                }
                swapped = {frozenset(c.literals) for c in analyze_event_dependence(node, after, events)}
                assert swapped == original, (seed, node)


class TestAnnotationFiles:
    """Test the annotation report and file format"""

    def test_report_lines(self, syringe_analysis):
        """Test the report lists events, blocks and loops"""
        lines = format_report(syringe_analysis.annotated)
        assert any(line.startswith("event E1 binary control_step:0") for line in lines)
        assert "block control_step:7 <- !E1 & E2" in lines
        assert "loop push_syringe:1 <- L1" in lines

    def test_save_and_load(self, syringe_analysis, tmp_path):
        """Test annotations survive a save and load"""
        path = save_annotations(syringe_analysis.annotated, tmp_path / "ann.json")
        loaded = load_annotations(path)
        assert loaded.block_annotations == syringe_analysis.annotated.block_annotations
        assert [e.id for e in loaded.events] == ["E1", "E2", "L1"]
        assert loaded.loop_annotations["push_syringe:1"].id == "L1"

    def test_unknown_event_reference(self, syringe_analysis):
        """Test annotations naming a missing event are rejected"""
        data = annotations_to_dict(syringe_analysis.annotated)
        data["blocks"][0]["alternatives"] = [["E9"]]
        with pytest.raises(AnalysisError):
            annotations_from_dict(data)

    def test_wrong_format(self):
        """Test a foreign JSON document is rejected"""
        with pytest.raises(AnalysisError):
            annotations_from_dict({"format": "something-else"})
