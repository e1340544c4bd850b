"""Command line entry points.

Everything is driven by one hierarchical YAML config; flags only override
the output directory, profile, seed list, and ranking threshold. Exit codes:
0 success, 2 configuration error, 3 a degenerate run was detected, 4 partial
failure (failed cells or verification mismatches).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .report import make_report, verify_bundle
from .runner import (RunnerError, ensure_benchmark, ensure_paired_data,
                     load_bundle, reevaluate, run_ablation, run_matrix,
                     run_paired, run_single_cell)
from .synthdata import GenerationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3
EXIT_PARTIAL = 4


def _add_common(p: argparse.ArgumentParser, with_seeds: bool = False) -> None:
    p.add_argument("-c", "--config", required=True, help="YAML experiment config")
    p.add_argument("--out", default=None, help="override output_dir")
    p.add_argument("--paper-profile", action="store_true",
                   help="full-scale settings (256px images, uncompressed schedule)")
    p.add_argument("--p-threshold", type=float, default=None,
                   help="override the significance threshold used for ranking")
    if with_seeds:
        p.add_argument("--seed", action="append", type=int, dest="seeds",
                       default=None, help="override config seeds (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segadapt",
        description="domain-adaptive segmentation benchmark runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize the synthetic benchmark")
    _add_common(p)

    p = sub.add_parser("train", help="train a single source->target cell")
    _add_common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="cell seed (default: first configured seed)")

    for name, desc in (("run-matrix", "every configured source->target pair "
                                      "across methods and seeds"),
                       ("run-ablation", "augmentation-operator ablation arms"),
                       ("run-paired", "paired-acquisition arms")):
        p = sub.add_parser(name, help=desc)
        _add_common(p, with_seeds=True)

    p = sub.add_parser("evaluate", help="re-evaluate a finished run directory")
    _add_common(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)

    p = sub.add_parser("report", help="render report.md and plots from a bundle")
    _add_common(p)

    p = sub.add_parser("verify", help="recompute every reported number "
                                      "from the persisted per-case metrics")
    _add_common(p)
    return parser


def _load(args) -> "ExperimentConfig":
    overrides = {"paper_profile": args.paper_profile,
                 "output_dir": args.out,
                 "p_threshold": args.p_threshold}
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    return load_config(args.config, **overrides)


def _bundle_exit(bundle) -> int:
    if bundle.any_failed():
        return EXIT_PARTIAL
    if bundle.any_degenerate():
        return EXIT_DEGENERATE
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    config = _load(args)
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    bench = ensure_benchmark(config, root)
    for name, clinic in sorted(bench.clinics.items()):
        split = clinic.split
        print(f"clinic {name}: {len(split.train)}/{len(split.val)}/"
              f"{len(split.test)} train/val/test")
    if config.paired is not None:
        pairs, train_ids, test_ids, _ = ensure_paired_data(config, root)
        print(f"paired set: {len(pairs)} subjects "
              f"({len(train_ids)} train, {len(test_ids)} test)")
    print(f"data ready under {root / 'benchmark'}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load(args)
    seed = args.seed if args.seed is not None else config.seeds[0]
    cell = run_single_cell(config, args.source, args.target, args.method, seed)
    tag = "cached" if cell.cached else "trained"
    print(f"{cell.experiment} {cell.method} seed={cell.seed}: {cell.status} "
          f"({tag}) -> {cell.run_dir}")
    if cell.status != "ok":
        print(f"error: {cell.error}", file=sys.stderr)
        return EXIT_PARTIAL
    if cell.degenerate:
        print("degenerate-output guard tripped during training", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def _run_and_summarize(runner, args) -> int:
    bundle = runner(_load(args))
    ok = sum(1 for c in bundle.cells if c.status == "ok")
    print(f"{bundle.kind}: {ok}/{len(bundle.cells)} cells ok "
          f"-> {bundle.root / 'bundle.json'}")
    for c in bundle.cells:
        if c.status != "ok":
            print(f"failed: {c.experiment}/{c.method}/seed{c.seed}: {c.error}",
                  file=sys.stderr)
        elif c.degenerate:
            print(f"degenerate: {c.experiment}/{c.method}/seed{c.seed}",
                  file=sys.stderr)
    return _bundle_exit(bundle)


def _cmd_evaluate(args) -> int:
    config = _load(args)
    summary = reevaluate(config, args.run_dir, args.source, args.target)
    for key in sorted(summary):
        print(f"{key}: {summary[key]:.4f}")
    return EXIT_OK


def _cmd_report(args) -> int:
    config = _load(args)
    bundle = load_bundle(config.output_dir)
    result = make_report(bundle)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"report: {result.root / 'report.md'} "
          f"({result.tables} tables, {len(result.plots)} plots)")
    return EXIT_OK


def _cmd_verify(args) -> int:
    config = _load(args)
    bundle = load_bundle(config.output_dir)
    mismatches = verify_bundle(bundle)
    for m in mismatches:
        print(f"mismatch: {m}", file=sys.stderr)
    print(f"verify: {len(mismatches)} mismatch(es)")
    return EXIT_PARTIAL if mismatches else EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "run-matrix": lambda a: _run_and_summarize(run_matrix, a),
    "run-ablation": lambda a: _run_and_summarize(run_ablation, a),
    "run-paired": lambda a: _run_and_summarize(run_paired, a),
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, GenerationError, RunnerError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
