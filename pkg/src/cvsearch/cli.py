"""Command-line entry point: ``cvsearch {search,tree,bench,trace}``.

Exit codes: 0 success, 2 usage error, 3 oracle failure, 4 invalid input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter
from importlib import resources
from pathlib import Path

from . import orchestrator
from .core import FeatureGrid, SearchConfig, SearchTrace
from .errors import CVSearchError, FormatError, InvalidArgument, OracleError, UnknownTarget
from .harness import POLICIES, SuiteConfig, make_suite, run_benchmark
from .oracles.http import ENDPOINT_ENV
from .oracles.simulated import SimulatedOracles, SimulatedScene
from .patching import build_tree

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ORACLE = 3
EXIT_INPUT = 4


class UsageError(Exception):
    pass


def _load_config(path) -> SearchConfig:
    return SearchConfig.load(path) if path else SearchConfig()


def _load_grid_or_scene(path) -> SimulatedScene:
    """A scene JSON, or a bare FGRD file wrapped as a scene without targets."""
    p = Path(path)
    try:
        head = p.read_bytes()[:4]
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if head == b"FGRD" or p.suffix == ".fgrd":
        return SimulatedScene(FeatureGrid.load(p), ())
    return SimulatedScene.load(p)


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def cmd_search(args) -> int:
    config = _load_config(args.config)
    if args.image:
        if args.oracle != "http":
            raise UsageError("--image requires --oracle http")
        from .oracles.http import HttpOracleSuite

        endpoint = args.endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise UsageError(f"--oracle http needs --endpoint or ${ENDPOINT_ENV}")
        try:
            oracles = HttpOracleSuite.from_path(args.image, endpoint)
        except OSError as exc:
            raise FormatError(f"cannot read image {args.image}: {exc}") from exc
    else:
        if args.oracle != "sim":
            raise UsageError("--scene runs on the simulated oracle; use --image with --oracle http")
        oracles = SimulatedOracles(SimulatedScene.load(args.scene))
    outcome = orchestrator.run(oracles, args.query, config)
    if args.trace_out:
        _write_text(args.trace_out, outcome.to_jsonl())
    print(json.dumps(outcome.to_dict(), indent=2))
    return EXIT_OK


def cmd_tree(args) -> int:
    config = _load_config(args.config)
    scene = _load_grid_or_scene(args.scene)
    depth = args.depth if args.depth is not None else config.depth_single
    if depth < 1:
        raise UsageError("--depth must be >= 1")
    tree = build_tree(scene.grid, config, depth)
    print(tree.dumps())
    return EXIT_OK


def _resolve_suite(source: str) -> SuiteConfig:
    if source == "smoke":
        text = resources.files("cvsearch").joinpath("data/smoke_suite.json").read_text(encoding="utf-8")
        return SuiteConfig.from_dict(json.loads(text))
    return SuiteConfig.load(source)


def cmd_bench(args) -> int:
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not policies:
        raise UsageError("--policies is empty")
    unknown = [p for p in policies if p not in POLICIES]
    if unknown:
        raise UsageError(f"unknown policies: {', '.join(unknown)} (choose from {', '.join(POLICIES)})")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    suite = _resolve_suite(args.suite)
    config = _load_config(args.config)
    out = Path(args.out)
    if not out.parent.exists() or (out.exists() and out.is_dir()):
        raise FormatError(f"cannot write report to {out}")
    report = run_benchmark(suite, policies, config, jobs=args.jobs, timing=args.timing)
    _write_text(out, report.dumps())
    if args.csv:
        _write_text(args.csv, report.to_csv())
    if args.emit_scenes:
        dest = Path(args.emit_scenes)
        try:
            dest.mkdir(parents=True, exist_ok=True)
            for case in make_suite(suite):
                case.scene.save(dest / f"scene_{case.index:04d}.json")
        except OSError as exc:
            raise FormatError(f"cannot write scenes to {dest}: {exc}") from exc
    print(f"{'policy':<12} {'success':>8} {'mean_cost':>10} {'median':>7} {'nodes':>7}  modes")
    for name, s in report.policies.items():
        modes = " ".join(f"{m}={c}" for m, c in s["mode_counts"].items() if c)
        print(
            f"{name:<12} {s['success_rate']:>8.3f} {s['mean_cost']:>10.3f} "
            f"{s['median_cost']:>7.1f} {s['mean_nodes_visited']:>7.2f}  {modes}"
        )
    return EXIT_OK


def cmd_trace(args) -> int:
    try:
        text = Path(args.path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {args.path}: {exc}") from exc
    trace, extra = SearchTrace.from_jsonl(text)
    summary = {
        "events": len(trace.events),
        "kinds": dict(sorted(Counter(e.kind for e in trace.events).items())),
        "counters": trace.counters(),
        "node_visits": trace.node_visits,
    }
    outcomes = [d["outcome"] for d in extra if "outcome" in d]
    if outcomes:
        summary["outcome"] = outcomes[-1]
        if outcomes[-1].get("counters") not in (None, trace.counters()):
            raise FormatError("outcome counters disagree with the event log")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvsearch", description="Assess-then-search visual question answering.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("search", help="answer one query", description="Answer one query and print the outcome JSON.")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", metavar="PATH", help="simulated scene JSON (offline, --oracle sim)")
    src.add_argument("--image", metavar="PATH", help="image file (requires --oracle http)")
    p.add_argument("--query", required=True, help="question about the image")
    p.add_argument("--config", metavar="PATH", help="SearchConfig JSON; defaults apply when omitted")
    p.add_argument("--oracle", choices=("sim", "http"), default="sim", help="oracle backend (default: sim)")
    p.add_argument("--endpoint", metavar="URL", help=f"inference service base URL (default: ${ENDPOINT_ENV})")
    p.add_argument("--trace-out", metavar="PATH", help="write the JSON Lines trace here")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("tree", help="dump the adaptive patch tree", description="Print the adaptive tree JSON for a scene.")
    p.add_argument("--scene", required=True, metavar="PATH", help="scene JSON or FGRD feature grid")
    p.add_argument("--config", metavar="PATH", help="SearchConfig JSON")
    p.add_argument("--depth", type=int, help="tree depth (default: config depth_single)")
    p.set_defaults(func=cmd_tree)

    p = sub.add_parser("bench", help="run the synthetic benchmark", description="Run policies over a scene suite.")
    p.add_argument("--suite", default="smoke", metavar="PATH", help="suite config JSON, or 'smoke' for the bundled suite")
    p.add_argument("--policies", default=",".join(POLICIES), help="comma-separated policies (default: %(default)s)")
    p.add_argument("--out", required=True, metavar="PATH", help="report JSON path")
    p.add_argument("--config", metavar="PATH", help="SearchConfig JSON")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    p.add_argument("--csv", metavar="PATH", help="also write per-scene records as CSV")
    p.add_argument("--timing", action="store_true", help="include wall times (report is then not reproducible)")
    p.add_argument("--emit-scenes", metavar="DIR", help="write the generated scenes to DIR")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("trace", help="validate and summarize a trace", description="Validate a JSON Lines trace.")
    p.add_argument("path", help="trace file written by search --trace-out")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cvsearch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OracleError, UnknownTarget) as exc:
        print(f"cvsearch: oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (FormatError, InvalidArgument, CVSearchError) as exc:
        print(f"cvsearch: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
