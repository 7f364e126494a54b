"""Command-line entry point: ``dmfd {gen-demos,train,eval,ablate,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .agent import EVAL_SEED_OFFSET, TrainingError
from .baselines import BASELINES, UnknownBaselineError
from .config import ConfigError, RunConfig, load_config, parse_config, with_overrides
from .dataset import DatasetFormatError, save_dataset
from .env import TASKS
from .expert import ExpertFailureError, generate_demonstrations

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

log = logging.getLogger("dmfd")


class UsageError(Exception):
    """Bad flags; reported with the config-error exit code."""


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--obs", choices=("state", "image"))
    p.add_argument("--out", type=Path, required=out_required)


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--baseline", help=f"one of {', '.join(BASELINES)}")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--steps", type=int, help="override budget_steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmfd", description="Deformable manipulation from demonstrations, desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="roll out the scripted expert and write a dataset file")
    _common(p, out_required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="overwrite an existing file")

    p = sub.add_parser("train", help="train DMfD or a baseline")
    _common(p)
    _training_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint of each seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--config", type=Path, help="fail unless the checkpoint was trained with this config")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=EVAL_SEED_OFFSET)
    p.add_argument("--out", type=Path, help="directory for eval_records.csv and eval_summary.json")

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("name", help=f"one of {', '.join(harness.ABLATIONS)}")
    _common(p)
    _training_flags(p)

    p = sub.add_parser("plot", help="aggregate metrics files into curves")
    p.add_argument("inputs", nargs="+", help="LABEL=PATH (file or directory searched for metrics.csv) or PATH")
    p.add_argument("--out", type=Path, required=True, help="output prefix; writes PREFIX.csv and PREFIX.svg")
    p.add_argument("--column", default="mean_p_hat")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else parse_config({})
    changes: dict = {}
    if getattr(args, "task", None):
        changes["task"] = args.task
    if getattr(args, "obs", None):
        changes["obs"] = args.obs
    if getattr(args, "dataset", None):
        changes["dataset"] = str(args.dataset)
    if getattr(args, "out", None) and args.command in ("train", "ablate"):
        changes["output_dir"] = str(args.out)
    if getattr(args, "baseline", None):
        changes["baseline"] = args.baseline
    if getattr(args, "steps", None) is not None:
        changes["budget_steps"] = args.steps
    if getattr(args, "seeds", None):
        changes["seeds"] = args.seeds
    elif getattr(args, "seed", None) is not None and args.command in ("train", "ablate"):
        changes["seeds"] = (args.seed,)
    return with_overrides(cfg, **changes)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_demos(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out: Path = args.out
    if out.exists() and not args.force:
        raise UsageError(f"{out} already exists; pass --force to overwrite")
    n = args.episodes if args.episodes is not None else cfg.demos.n_episodes
    seed = args.seed if args.seed is not None else cfg.demos.seed
    if n < 1:
        raise UsageError("--episodes must be >= 1")
    ds = generate_demonstrations(replace(cfg.env, obs_mode="state"), n, seed, cfg.demos.filter_threshold)
    out.parent.mkdir(parents=True, exist_ok=True)
    size = save_dataset(ds, out)
    mean = float(np.mean([ep.p_hat_final for ep in ds.episodes]))
    print(f"episodes: {ds.n_episodes}")
    print(f"mean p_hat: {mean!r}")
    print(f"file size: {size} bytes")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    root = Path(cfg.paths.output_dir)
    jobs = [(replace(cfg, seeds=(s,)), s, harness.seed_dir(root, s), args.resume) for s in cfg.seeds]
    results = harness.run_jobs(jobs)
    for r in results:
        f = r.final
        print(f"seed {r.seed}: mean {f['mean']:.4f} +- {f['std']:.4f}, median {f['median']:.4f} (q25 {f['q25']:.4f}, q75 {f['q75']:.4f}) -> {r.out_dir}")
    _write_group_summary(root, results)
    return EXIT_OK


def _write_group_summary(root: Path, results: list[harness.RunResult]) -> None:
    root.mkdir(parents=True, exist_ok=True)
    medians = [r.final["median"] for r in results]
    doc = {
        "seeds": [r.seed for r in results],
        "per_seed": {str(r.seed): r.final for r in results},
        "median_of_seed_medians": float(np.median(medians)),
        "mean_of_seed_means": float(np.mean([r.final["mean"] for r in results])),
    }
    (root / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_eval(args: argparse.Namespace) -> int:
    if not args.checkpoint.exists():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    expect = load_config(args.config) if args.config else None
    records, s = harness.eval_checkpoint(args.checkpoint, args.episodes, args.seed, expect)
    print(f"episodes: {s['n']}")
    print(f"mean p_hat: {s['mean']:.4f} +- {s['std']:.4f}")
    print(f"median: {s['median']:.4f}  q25: {s['q25']:.4f}  q75: {s['q75']:.4f}")
    out = args.out or args.checkpoint.parent
    out.mkdir(parents=True, exist_ok=True)
    harness.write_records(out / "eval_records.csv", records)
    (out / "eval_summary.json").write_text(json.dumps({"checkpoint": str(args.checkpoint), "seed": args.seed, **s}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.name not in harness.ABLATIONS:
        raise ConfigError("ablation", f"unknown ablation {args.name!r}; valid names: {', '.join(harness.ABLATIONS)}")
    seeds = args.seeds or ((args.seed,) if args.seed is not None else (0, 1, 2))
    root = Path(cfg.paths.output_dir)
    jobs = harness.ablation_jobs(args.name, cfg, root, seeds)
    results = harness.run_jobs(jobs)
    by_cell: dict[str, list] = {}
    for (_, _, out, _), r in zip(jobs, results):
        by_cell.setdefault(out.parent.name, []).append(r)
    for cell, rs in by_cell.items():
        means = [r.final["mean"] for r in rs]
        print(f"{cell}: mean over seeds {np.mean(means):.4f}, std over seeds {np.std(means):.4f}, median of medians {np.median([r.final['median'] for r in rs]):.4f}")
        _write_group_summary(root / args.name / cell, rs)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    curves = []
    for item in args.inputs:
        label, _, path = item.rpartition("=")
        target = Path(path)
        files = harness.collect_metric_files(target)
        if not files:
            raise UsageError(f"no metrics.csv found under {target}")
        runs = [harness.read_metrics(f) for f in files]
        curve, resampled = harness.aggregate_curves(label or target.name, runs, args.column)
        if resampled:
            log.warning("%s: runs have different step grids; resampled onto the coarsest grid (%d points)", curve.label, len(curve.steps))
        curves.append(curve)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = args.out.with_suffix(".csv"), args.out.with_suffix(".svg")
    harness.write_curves_csv(csv_path, curves)
    harness.write_curves_svg(svg_path, curves, args.column)
    print(f"wrote {csv_path} and {svg_path}")
    return EXIT_OK


COMMANDS = {"gen-demos": cmd_gen_demos, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "plot": cmd_plot}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UnknownBaselineError, UsageError) as exc:
        print(f"dmfd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, ExpertFailureError, DatasetFormatError, OSError, ValueError) as exc:
        print(f"dmfd: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
