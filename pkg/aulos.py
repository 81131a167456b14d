#!/usr/bin/env python3
"""
Aulos - Event-aware anomaly detection for CPS control programs

Finds the physical events a control program's decisions depend on, learns an
event-aware syscall automaton from normal runs and checks live traces against
both the automaton and the physical world.

Usage:
    python aulos.py analyze programs/syringe_pump.ir
    python aulos.py simulate --scenario syringe_train --out-dir runs
    python aulos.py train --program syringe_pump runs/syringe_train.trace --out runs/model.json
    python aulos.py monitor --model runs/model.json runs/syringe_branch_attack.trace \\
        --sensor-log runs/syringe_branch_attack.sensors.log
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

# Add parent to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from pydantic import ValidationError

from core.config import RunConfig, build_run_config, parse_model_kinds, read_config_file
from core.detector import Detector, load_reports, summarize_reports, write_reports
from core.event_analysis import AnalysisError, format_report, save_annotations, load_annotations
from core.fsa_model import FsaError, TraceFormatError, iter_trace, save_model, load_model, write_trace
from core.mini_ir import IRError
from core.pipeline import (
    baseline_reports, coverage_lines, discover_runs, expand_trace_paths, load_analyzed, make_verifier,
    train,
)
from core.simulator import SCENARIOS, ScenarioError, SimulationError, scenario, simulate
from core.verifier import ReplayClock, VerifierError, load_sensor_log, serve, write_sensor_log

EXIT_CLEAN = 0
EXIT_ANOMALIES = 1
EXIT_ERROR = 2


def _constants(pairs: Optional[List[str]]) -> Dict[str, float]:
    """NAME=VALUE overrides from --set."""
    constants = {}
    for pair in pairs or []:
        name, sep, value = pair.partition("=")
        if not sep:
            raise ValueError(f"--set expects NAME=VALUE, got {pair!r}")
        constants[name.strip()] = float(value)
    return constants


def _run_config(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    flags = {k: v for k, v in vars(args).items() if k != "config"}
    if isinstance(flags.get("neighbors"), str):
        flags["neighbors"] = [a.strip() for a in flags["neighbors"].split(",") if a.strip()]
    return build_run_config(file_values, flags)


def cmd_analyze(args):
    """Handle analyze command."""
    print("Aulos - Analyzing Program")
    print("=" * 40)

    try:
        program, analysis = load_analyzed(args.program, _constants(args.set))
    except (IRError, AnalysisError, ValueError, OSError) as e:
        print(f"Error: {e}")
        return EXIT_ERROR

    print(f"Program: {program.name} (entry {program.entry})")
    print(f"  Functions: {len(program.functions)}")
    print(f"  Sensor APIs: {', '.join(sorted(program.sensor_apis)) or '-'}")
    print(f"  Actuation APIs: {', '.join(sorted(program.actuation_apis)) or '-'}")
    print()
    for line in format_report(analysis.annotated):
        print(line)

    if args.out:
        path = save_annotations(analysis.annotated, args.out)
        print(f"\nAnnotations: {path}")

    print("\nDone!")
    return EXIT_CLEAN


def cmd_simulate(args):
    """Handle simulate command."""
    print("Aulos - Simulating Plant")
    print("=" * 40)

    try:
        run = _run_config(args)
        plant, attack = scenario(args.scenario, seed=run.seed, cycles=run.cycles)
        result = simulate(plant, attack)
    except (ScenarioError, SimulationError, IRError, ValidationError, ValueError, OSError) as e:
        print(f"Error: {e}")
        return EXIT_ERROR

    print(f"Scenario: {args.scenario}")
    print(f"  Program: {result.program}")
    print(f"  Cycles: {result.cycles}")
    print(f"  Syscalls: {len(result.records)}")
    if attack is not None:
        print(f"  Attack: {attack.kind} on {attack.sensor} in {len(result.attacked_cycles)} cycles")

    paths = result.write(run.out_dir, args.stem or args.scenario)
    if args.out_trace:
        paths["trace"] = write_trace(result.records, args.out_trace)
    if args.out_sensors:
        paths["sensors"] = write_sensor_log(result.readings, args.out_sensors)
    for kind, path in paths.items():
        print(f"  {kind}: {path}")

    if args.stream:
        # Blocks until a reader opens the pipe
        print(f"\nStreaming to {args.stream}...")
        with open(args.stream, "w") as pipe:
            for rec in result.records:
                pipe.write(rec.format() + "\n")
                pipe.flush()

    print("\nDone!")
    return EXIT_CLEAN


def cmd_train(args):
    """Handle train command."""
    print("Aulos - Training Model")
    print("=" * 40)

    try:
        ngram, scfd = parse_model_kinds(args.model_kinds)
        args.ngram = args.ngram if args.ngram is not None else ngram
        args.scfd = args.scfd or scfd
        trace_paths = expand_trace_paths(list(args.traces) + list(args.trace_sources or []))
        if not trace_paths:
            raise ValueError("training needs at least one trace (positional or --traces)")
        run = _run_config(args)
        program, analysis = load_analyzed(args.program, _constants(args.set))
        annotated = load_annotations(args.annotations) if args.annotations else analysis.annotated
        runs = discover_runs(trace_paths, run.sensor_log)
        print(f"Program: {program.name}")
        print(f"  Traces: {len(runs)} ({sum(len(r.records) for r in runs)} records)")
        efsa = train(program, runs, annotated, ngram=run.ngram, scfd=run.scfd, seed=run.seed)
    except (IRError, AnalysisError, TraceFormatError, FsaError, ValidationError, ValueError, OSError) as e:
        print(f"Error: {e}")
        return EXIT_ERROR

    fsa = efsa.fsa
    print("\nModel:")
    print(f"  States: {len(fsa.states)}")
    print(f"  Edges: {len(fsa.edges)} ({len(efsa.event_edges)} event-constrained)")
    print(f"  Syscalls: {', '.join(fsa.alphabet)}")
    if efsa.window_header is not None:
        print(f"  Window header: 0x{efsa.window_header:x}")
    for loop_id, loop in sorted(efsa.intensity_loops.items()):
        if loop.model is None:
            print(f"  Loop {loop_id}: no intensity model")
            continue
        m = loop.model
        print(f"  Loop {loop_id}: iterations = {m.slope:.6f} * {m.sensor} {m.intercept:+.6f} "
              f"({loop.per_iteration_syscall_count} syscalls/iteration, baseline {m.baseline_syscalls_per_window})")
    if "ngram_minimal_n" in efsa.baselines:
        for composite, n in sorted(efsa.baselines["ngram_minimal_n"].items()):
            print(f"  Unique event n-gram for [{composite}]: {'n=' + str(n) if n else 'none'}")

    if args.coverage:
        print("\nCoverage (count, edge, * = event-constrained):")
        for line in coverage_lines(efsa):
            print(f"  {line}")
    if efsa.unmapped:
        print("\nWarning: annotated blocks with no learned transition:")
        for fn, block in efsa.unmapped:
            print(f"  {fn}:{block}")

    path = save_model(efsa, args.out)
    print(f"\nModel: {path}")
    print("\nDone!")
    return EXIT_CLEAN


def cmd_monitor(args):
    """Handle monitor command."""
    print("Aulos - Monitoring Trace", file=sys.stderr)
    print("=" * 40, file=sys.stderr)

    try:
        run = _run_config(args)
        efsa = load_model(args.model)
        mode = run.verifier_mode
        if mode == "local" and run.neighbors:
            mode = "both" if run.sensor_log else "distributed"
        verifier = None
        if run.sensor_log or run.neighbors:
            config = run.model_copy(update={"verifier_mode": mode}).verifier_config()
            verifier = make_verifier(config)
        trace = args.trace_option or args.trace
        if not trace:
            raise ValueError("monitor needs a trace (positional or --trace)")
        source = sys.stdin if trace == "-" else open(trace)
    except (FsaError, TraceFormatError, VerifierError, ValidationError, ValueError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR

    print(f"Model: {efsa.program} ({len(efsa.fsa.states)} states, {len(efsa.event_edges)} checkpoints)",
          file=sys.stderr)
    print(f"  Verifier: {mode if verifier else 'none (transition checks only)'}", file=sys.stderr)

    detector = Detector(efsa, verifier, run.detector_settings())
    records = []
    reports = []
    try:
        def tee():
            for rec in iter_trace(source):
                records.append(rec)
                yield rec

        for report in detector.run(tee()):
            reports.append(report)
            if not args.quiet:
                print(report.format_line())
        if args.baseline:
            extra = baseline_reports(efsa, records, verifier, run.fail_open, args.baseline)
            for report in extra:
                if not args.quiet:
                    print(report.format_line())
            reports.extend(extra)
    except TraceFormatError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        if source is not sys.stdin:
            source.close()
        if verifier is not None:
            verifier.close()

    if args.report:
        write_reports(reports, args.report)

    summary = detector.summary
    counted = sum(1 for r in reports if r.counted)
    print("\nSummary:", file=sys.stderr)
    print(f"  Records: {summary.records}", file=sys.stderr)
    print(f"  Windows: {summary.windows}", file=sys.stderr)
    for kind, count in sorted(summary.reports.items()):
        print(f"  {kind}: {count}", file=sys.stderr)
    print(f"  Anomalies: {counted}", file=sys.stderr)
    print(f"  Mean check: {summary.mean_check_ms:.4f} ms/record", file=sys.stderr)
    print("\nDone!", file=sys.stderr)
    return EXIT_ANOMALIES if counted else EXIT_CLEAN


def cmd_serve_verifier(args):
    """Handle serve-verifier command."""
    print("Aulos - Verifier Node")
    print("=" * 40)

    try:
        feed = load_sensor_log(args.feed, source=args.name)
    except (TraceFormatError, OSError) as e:
        print(f"Error: {e}")
        return EXIT_ERROR
    starts = [feed.readings(s)[0].timestamp for s in feed.sensors()]
    clock = ReplayClock(start=min(starts) if starts else 0.0, speed=args.replay_speed)

    print(f"Feed: {args.feed} ({len(feed)} readings of {', '.join(feed.sensors())})")
    print(f"  Replay speed: {args.replay_speed or 'latest reading'}")
    try:
        if args.http:
            import uvicorn
            from server import create_app
            host, _, port = args.bind.rpartition(":")
            print(f"  HTTP on {args.bind}")
            uvicorn.run(create_app(feed, clock), host=host, port=int(port))
        else:
            print(f"  Listening on {args.bind}")
            serve(feed, args.bind, clock)
    except KeyboardInterrupt:
        pass
    except (OSError, ValueError) as e:
        print(f"Error: {e}")
        return EXIT_ERROR

    print("\nDone!")
    return EXIT_CLEAN


def cmd_report(args):
    """Handle report command."""
    print("Aulos - Anomaly Report")
    print("=" * 40)

    try:
        reports = load_reports(args.report)
    except (ValueError, KeyError, OSError) as e:
        print(f"Error: {e}")
        return EXIT_ERROR

    summary = summarize_reports(reports)
    print(f"Reports: {summary['total']} ({summary['anomalies']} counted as anomalies)")
    for kind, count in summary["by_kind"].items():
        print(f"  {kind:22} {count:6d}  first at t={summary['first_seen'][kind]:.6f}")
    if summary["windows"]:
        print(f"  Windows: {', '.join(str(w) for w in summary['windows'])}")
    if args.list:
        print()
        for report in reports:
            print(report.format_line())

    return EXIT_ANOMALIES if summary["anomalies"] else EXIT_CLEAN


def cmd_scenarios(args):
    """Handle scenarios command."""
    print("Simulator Scenarios")
    print("=" * 40)

    for name, entry in SCENARIOS.items():
        if args.training is not None and entry.training != args.training:
            continue
        tag = " (training)" if entry.training else ""
        print(f"\n  {name}{tag}")
        print(f"    {entry.description}")
        print(f"    program={entry.plant.program} cycles={entry.plant.cycles}")

    return EXIT_CLEAN


def _add_verifier_flags(p):
    p.add_argument("--verifier", metavar="SOURCES",
                   help="local:<sensor log> and/or remote:<host:port> items, comma-separated")
    p.add_argument("--sensor-log", help="Trusted local sensor log")
    p.add_argument("--neighbors", help="Comma-separated neighbor verifiers (host:port)")
    p.add_argument("--verifier-mode", choices=["local", "distributed", "both"],
                   help="Verification sources (default: inferred from the flags given)")
    p.add_argument("--samples", type=int, help="Readings per majority vote (odd)")
    p.add_argument("--staleness", type=float, help="Max reading age in seconds")
    p.add_argument("--timeout", type=float, help="Neighbor timeout in seconds")


def build_parser():
    parser = argparse.ArgumentParser(
        description="Aulos - Event-aware anomaly detection for CPS control programs",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Events and control dependences of a program
  python aulos.py analyze programs/syringe_pump.ir

  # Normal runs for training, then an attack run
  python aulos.py simulate --scenario syringe_train --out-dir runs
  python aulos.py simulate --scenario syringe_branch_attack --out-dir runs

  # Learn the model and monitor the attack run
  python aulos.py train --program syringe_pump runs/syringe_train.trace --out runs/syringe.json
  python aulos.py monitor --model runs/syringe.json runs/syringe_branch_attack.trace \\
      --sensor-log runs/syringe_branch_attack.sensors.log --report runs/attack.jsonl

  # Serve a sensor log to other monitors
  python aulos.py serve-verifier --feed runs/syringe_normal.neighbor0.log --bind 127.0.0.1:7700
"""
    )
    parser.add_argument("--config", help="key = value config file (flags win)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    subparsers = parser.add_subparsers(dest="command", help="Commands")

    # Analyze command
    an_parser = subparsers.add_parser("analyze", help="Identify events and annotate the CFG")
    an_parser.add_argument("program", help="IR file or bundled program name")
    an_parser.add_argument("--set", action="append", metavar="NAME=VALUE", help="Override an IR constant")
    an_parser.add_argument("--out", "-o", help="Write annotations JSON")

    # Simulate command
    sim_parser = subparsers.add_parser("simulate", help="Run a plant scenario")
    sim_parser.add_argument("--scenario", "-s", required=True, help="Scenario name (see 'scenarios')")
    sim_parser.add_argument("--seed", type=int, help="Random seed")
    sim_parser.add_argument("--cycles", type=int, help="Scan cycles")
    sim_parser.add_argument("--out-dir", "-o", help="Output directory")
    sim_parser.add_argument("--stem", help="Output file stem (default: scenario name)")
    sim_parser.add_argument("--out-trace", help="Also write the trace here")
    sim_parser.add_argument("--out-sensors", help="Also write the ground-truth sensor log here")
    sim_parser.add_argument("--stream", help="Write trace records to this named pipe")

    # Train command
    tr_parser = subparsers.add_parser("train", help="Learn the eFSA from normal traces")
    tr_parser.add_argument("traces", nargs="*", help="Trace files (companion .sensors.log/.truth.json are used)")
    tr_parser.add_argument("--traces", dest="trace_sources", action="append", metavar="DIR",
                           help="Directory of .trace files, or a trace file (repeatable)")
    tr_parser.add_argument("--program", "-p", required=True, help="IR file or bundled program name")
    tr_parser.add_argument("--annotations", help="Annotations JSON from 'analyze'")
    tr_parser.add_argument("--set", action="append", metavar="NAME=VALUE", help="Override an IR constant")
    tr_parser.add_argument("--sensor-log", help="Sensor log for traces without a companion log")
    tr_parser.add_argument("--model", dest="model_kinds", action="append", metavar="KIND",
                           help="efsa, ngram:<n> or scfd:<auto|k> (repeatable; the eFSA is always built)")
    tr_parser.add_argument("--ngram", type=int, help="Also build an n-gram baseline of this length")
    tr_parser.add_argument("--scfd", help="Also build an SCFD profile ('auto' or cluster count)")
    tr_parser.add_argument("--seed", type=int, help="Random seed for clustering")
    tr_parser.add_argument("--out", "-o", default="model.json", help="Output model file")
    tr_parser.add_argument("--coverage", action="store_true", help="Print per-edge training counts")

    # Monitor command
    mon_parser = subparsers.add_parser("monitor", help="Check a trace against a model")
    mon_parser.add_argument("trace", nargs="?", help="Trace file, named pipe, or - for stdin")
    mon_parser.add_argument("--trace", dest="trace_option", metavar="TRACE", help="Same as the positional trace")
    mon_parser.add_argument("--model", "-m", required=True, help="Model file from 'train'")
    _add_verifier_flags(mon_parser)
    mon_parser.add_argument("--tolerance", type=float, help="Intensity tolerance in sensor units")
    mon_parser.add_argument("--fail-open", dest="fail_open", action="store_true", default=None,
                            help="Unverifiable checks are warnings (default)")
    mon_parser.add_argument("--fail-closed", dest="fail_open", action="store_false",
                            help="Unverifiable checks count as anomalies")
    mon_parser.add_argument("--baseline", action="append", choices=["ngram", "scfd"],
                            help="Also run a baseline stored in the model")
    mon_parser.add_argument("--report", "-r", help="Write reports as JSON Lines")
    mon_parser.add_argument("--quiet", "-q", action="store_true", help="Only print the summary")

    # Serve-verifier command
    sv_parser = subparsers.add_parser("serve-verifier", help="Serve a sensor log to monitors")
    sv_parser.add_argument("--feed", required=True, help="Sensor log to serve")
    sv_parser.add_argument("--bind", default="127.0.0.1:7700", help="host:port")
    sv_parser.add_argument("--name", default="local", help="Source name in readings")
    sv_parser.add_argument("--replay-speed", type=float, default=0.0,
                           help="Feed seconds per wall second (0 = always the latest reading)")
    sv_parser.add_argument("--http", action="store_true", help="Serve the HTTP API instead")

    # Report command
    rep_parser = subparsers.add_parser("report", help="Summarize a JSON Lines report")
    rep_parser.add_argument("report", help="Report file from 'monitor --report'")
    rep_parser.add_argument("--list", "-l", action="store_true", help="Print every report")

    # Scenarios command
    sc_parser = subparsers.add_parser("scenarios", help="List simulator scenarios")
    sc_parser.add_argument("--training", action="store_true", default=None, help="Only training sweeps")

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="[%(asctime)s] %(levelname)s: %(message)s",
    )

    if not args.command:
        parser.print_help()
        return EXIT_CLEAN

    if args.command == "analyze":
        return cmd_analyze(args)
    elif args.command == "simulate":
        return cmd_simulate(args)
    elif args.command == "train":
        return cmd_train(args)
    elif args.command == "monitor":
        return cmd_monitor(args)
    elif args.command == "serve-verifier":
        return cmd_serve_verifier(args)
    elif args.command == "report":
        return cmd_report(args)
    elif args.command == "scenarios":
        return cmd_scenarios(args)

    return EXIT_CLEAN


if __name__ == "__main__":
    sys.exit(main())
