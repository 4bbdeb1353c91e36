"""Command-line surface over the pipeline stages.

Every subcommand is a thin wrapper over one library operation. Exit codes:
0 success, 1 user error (bad flags or config), 2 stage/internal failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .data import load_dataset, patchify, save_dataset, split_dataset
from .errors import ConfigError, ContractError, DatasetLoadError, SsgnetError, StageError
from .experiment import (MetricsReport, RunContext, build_report, compare_runs,
                         ensure_stage, load_config, render_compare_md,
                         resolve_runs_root, run_experiment, train_one_generator,
                         write_report_files)
from .util import dump_json


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the CLI contract wants 1.
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="ssgnet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--run-dir", type=Path, help="run directory (default: runs root / run_id)")
    common.add_argument("--runs-root", type=Path, help="override the runs root directory")
    common.add_argument("--seed", type=int, help="override the config's master seed")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def stage_cmd(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_text)

    stage_cmd("toygen", "generate the configured dataset and its splits")
    stage_cmd("split", "split a dataset directory into train/val/test")

    p = sub.add_parser("patchify", parents=[common], help="tile a dataset into labeled patches")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", dest="out_dir", type=Path, required=True)
    p.add_argument("--patch-size", type=int, required=True)
    p.add_argument("--stride", type=int, required=True)

    p = stage_cmd("train-gen", "train the generator for one class (or all planned classes)")
    p.add_argument("--class", dest="class_id", type=int, help="train only this class")

    stage_cmd("synthesize", "materialize the augmentation plan into synthetic images")

    p = stage_cmd("plan-augment", "compute the synthetic-augmentation plan")
    p.add_argument("--strategy", help="balance | frac:<f> | fixed:<M> (overrides config)")

    stage_cmd("train-cls", "train the baseline classifier")
    stage_cmd("train-seg", "train a baseline segmenter (no pseudo-labeling)")

    p = stage_cmd("ssl-run", "run iterative pseudo-labeling rounds")
    p.add_argument("--rounds", type=int, help="number of refinement rounds (overrides config)")

    stage_cmd("eval", "evaluate trained models on the test split")
    stage_cmd("fid", "score synthetic image fidelity per class")
    stage_cmd("report", "write report.json/md/csv and plots")

    p = sub.add_parser("compare", parents=[common], help="compare two finished runs")
    p.add_argument("baseline", type=Path, help="baseline run dir (or report.json)")
    p.add_argument("treatment", type=Path, help="treatment run dir (or report.json)")
    p.add_argument("--out", type=Path, help="write the delta table as JSON here")

    return parser


def _context(args) -> RunContext:
    if args.config is None:
        raise ConfigError("this command needs --config")
    cfg = load_config(args.config, seed_override=args.seed)
    if getattr(args, "strategy", None):
        cfg = replace(cfg, augment=replace(cfg.augment, strategy=args.strategy))
    if getattr(args, "rounds", None) is not None:
        if cfg.ssl is None:
            raise ConfigError("--rounds applies to segmentation configs")
        cfg = replace(cfg, ssl=replace(cfg.ssl, rounds=args.rounds))
    run_dir = args.run_dir
    if run_dir is None:
        run_dir = resolve_runs_root(args.runs_root) / cfg.run_id
    return RunContext(cfg, run_dir)


def _load_report(path: Path) -> MetricsReport:
    if path.is_dir():
        path = path / "report.json"
    if not path.is_file():
        raise ConfigError(f"no report at {path}; run `ssgnet report` first")
    return MetricsReport.load(path)


def _dispatch(args) -> int:
    cmd = args.command
    if cmd is None:
        raise _UsageError("a subcommand is required")

    if cmd == "patchify":
        d = load_dataset(args.in_dir)
        patches = patchify(d, args.patch_size, args.stride)
        save_dataset(patches, args.out_dir)
        print(f"wrote {len(patches)} patches to {args.out_dir}")
        return 0

    if cmd == "compare":
        delta = compare_runs(_load_report(args.baseline), _load_report(args.treatment))
        print(render_compare_md(delta), end="")
        if args.out:
            dump_json(args.out, delta)
        return 0

    ctx = _context(args)

    if cmd in ("toygen", "split"):
        payload = ensure_stage(ctx, "dataset")
        print(f"dataset ready under {ctx.run_dir / 'data'}: sizes {payload['sizes']}")
    elif cmd == "plan-augment":
        payload = ensure_stage(ctx, "plan")
        print(f"plan: {payload['plan']}")
    elif cmd == "train-gen":
        if args.class_id is not None:
            ensure_stage(ctx, "plan")
            ckpt = train_one_generator(ctx, args.class_id)
            print(f"generator checkpoint: {ckpt}")
        else:
            payload = ensure_stage(ctx, "generators")
            print(f"trained generators for classes: {sorted(payload['classes'])}")
    elif cmd == "synthesize":
        payload = ensure_stage(ctx, "synthesize")
        print(f"synthetic set: {payload['size']} samples, per class {payload['class_counts']}")
    elif cmd == "train-cls":
        if ctx.cfg.task != "classification":
            raise ConfigError("train-cls needs a classification config")
        payload = ensure_stage(ctx, "train_baseline")
        print(f"baseline classifier: {payload['checkpoint']}")
    elif cmd == "train-seg":
        if ctx.cfg.task != "segmentation":
            raise ConfigError("train-seg needs a segmentation config")
        payload = ensure_stage(ctx, "train_baseline")
        print(f"baseline segmenter: {payload['checkpoint']}")
    elif cmd == "ssl-run":
        payload = ensure_stage(ctx, "ssl")
        for row in payload["rounds"]:
            print(f"{row['label']}: val dice {row['metrics']['dice']:.4f}")
    elif cmd == "eval":
        name = "evaluate" if ctx.cfg.task == "classification" else "evaluate_seg"
        payload = ensure_stage(ctx, name)
        print(f"test metrics: {payload['test']}")
    elif cmd == "fid":
        payload = ensure_stage(ctx, "fid")
        for row in payload["rows"]:
            print(f"class {row['class_id']}: FID {row['value']:.4f}")
        if not payload["rows"]:
            print("no FID rows (disabled or not enough samples)")
    elif cmd == "report":
        report = build_report(ctx)
        paths = write_report_files(report, ctx.run_dir)
        print(f"report written: {paths['md']}")
    else:  # pragma: no cover - parser restricts commands
        raise _UsageError(f"unknown command {cmd!r}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _dispatch(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ContractError, DatasetLoadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SsgnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
