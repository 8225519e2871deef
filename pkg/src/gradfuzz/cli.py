"""Command-line frontend: fuzz a target, replay a suite, print reports,
or serve a target over TCP for a remote engine."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .executors import RemoteExecutor, TargetServer
from .fuzz_loop import (
    FuzzBudget,
    FuzzOptions,
    load_manifest,
    replay_suite,
    run_fuzzing,
    save_suite,
)
from .minivm import ParseError, VmLimits, parse_program


def _add_limit_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--max-trace-length", type=int, default=10_000)
    parser.add_argument("--max-stack-size", type=int, default=256)
    parser.add_argument("--max-input-bytes", type=int, default=4_096)
    parser.add_argument("--step-budget", type=int, default=10_000_000)


def _limits(args) -> VmLimits:
    return VmLimits(args.max_trace_length, args.max_stack_size,
                    args.max_input_bytes, args.step_budget)


def _load_target(path: str):
    target = Path(path)
    if not target.exists():
        raise SystemExit(f"error: target not found: {target}")
    try:
        return parse_program(target.read_text(encoding="utf-8"))
    except ParseError as exc:
        raise SystemExit(f"error: {target}: {exc}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradfuzz",
        description="Coverage-guided fuzzing of .mc targets via gradient "
                    "descent on branching values.")
    sub = parser.add_subparsers(dest="command", required=True)

    fuzz = sub.add_parser("fuzz", help="fuzz a target and write a suite")
    fuzz.add_argument("-t", "--target", required=True)
    fuzz.add_argument("-o", "--out", required=True)
    fuzz.add_argument("--seed", type=int, default=0)
    fuzz.add_argument("--max-executions", type=int, default=10_000)
    fuzz.add_argument("--max-seconds", type=float, default=None)
    fuzz.add_argument("--fill-byte", type=int, choices=(0, 85), default=0)
    fuzz.add_argument("--remote", default=None, metavar="HOST:PORT",
                      help="execute via a serving process instead of "
                           "in-process")
    _add_limit_args(fuzz)

    replay = sub.add_parser("replay",
                            help="re-execute a suite and verify its manifest")
    replay.add_argument("-t", "--target", required=True)
    replay.add_argument("-s", "--suite", required=True)

    report = sub.add_parser("report", help="print a stats summary")
    report.add_argument("-s", "--suite", required=True)

    serve = sub.add_parser("serve", help="serve a target for remote fuzzing")
    serve.add_argument("-t", "--target", required=True)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=0)
    _add_limit_args(serve)
    # generous default caps so optimizer-extended configs are accepted
    serve.set_defaults(max_trace_length=320_000, max_input_bytes=16_384,
                       max_stack_size=1_024, step_budget=320_000_000)
    return parser


def cmd_fuzz(args) -> int:
    program = _load_target(args.target)
    options = FuzzOptions(limits=_limits(args), fill_byte=args.fill_byte,
                          seed=args.seed)
    budget = FuzzBudget(max_executions=args.max_executions,
                        max_seconds=args.max_seconds)
    executor = RemoteExecutor(args.remote) if args.remote else None
    try:
        suite, stats = run_fuzzing(program, budget, options,
                                   executor=executor)
    finally:
        if executor is not None:
            executor.close()
    save_suite(args.out, suite, stats, options)
    cov = suite.coverage
    print(f"{len(suite.tests)} tests -> {args.out}")
    print(f"covered {cov['uids_covered']}/{cov['uids_discovered']} "
          f"instructions, {cov['execution_ids_covered']}/"
          f"{cov['execution_ids_discovered']} execution ids, "
          f"{stats.total_executions} executions")
    return 0


def cmd_replay(args) -> int:
    program = _load_target(args.target)
    try:
        ok, divergence = replay_suite(program, args.suite)
    except FileNotFoundError as exc:
        raise SystemExit(f"error: {exc}")
    if ok:
        print("replay ok")
        return 0
    print(f"replay diverged: {divergence}", file=sys.stderr)
    return 1


def cmd_report(args) -> int:
    stats_path = Path(args.suite) / "stats.json"
    if not stats_path.exists():
        raise SystemExit(f"error: no stats document at {stats_path}")
    stats = json.loads(stats_path.read_text(encoding="utf-8"))
    manifest = load_manifest(args.suite)
    cov = manifest["coverage"]
    print(f"seed:            {stats['seed']}")
    print(f"iterations:      {stats['iterations']}")
    executions = stats["executions"]
    print(f"executions:      {executions['total']}")
    for kind, count in executions.items():
        if kind != "total" and count:
            print(f"  {kind:<20} {count}")
    print(f"tree nodes:      {stats['tree_nodes']}")
    print(f"instructions:    {cov['uids_covered']}/{cov['uids_discovered']} "
          f"covered")
    print(f"execution ids:   {cov['execution_ids_covered']}/"
          f"{cov['execution_ids_discovered']} covered")
    print("terminations:")
    for kind, count in stats["terminations"].items():
        if count:
            print(f"  {kind:<30} {count}")
    print(f"tests:           {len(manifest['tests'])}")
    return 0


def cmd_serve(args) -> int:
    program = _load_target(args.target)
    server = TargetServer(program, _limits(args), args.host, args.port)
    host, port = server.address
    print(f"serving {args.target} on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"fuzz": cmd_fuzz, "replay": cmd_replay,
                "report": cmd_report, "serve": cmd_serve}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
