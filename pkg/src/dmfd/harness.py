"""Run orchestration behind the CLI: training runs, checkpoints, evaluation,
ablation grids and learning-curve aggregation."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import nn
from .agent import (
    EVAL_SEED_OFFSET,
    AgentConfig,
    MetricsRow,
    Trainer,
    TrainingError,
    evaluate,
    make_specs,
    AgentNets,
    summarize,
)
from .baselines import baseline_spec, bc_nets, bc_train
from .config import ConfigError, RunConfig, dump_config, dumps_config, parse_config, with_overrides
from .dataset import config_from_meta, load_dataset, save_dataset
from .env import EnvConfig, EvalRecord
from .expert import DemoDataset, duplicate_episodes, generate_demonstrations

log = logging.getLogger(__name__)

METRICS_FIELDS = tuple(f.name for f in fields(MetricsRow) if f.name != "wall_seconds")
TIMING_FIELDS = ("step", "wall_seconds")
KEEP_CHECKPOINTS = 2


class MissingDatasetError(TrainingError):
    pass


# ---------------------------------------------------------------------------
# small file helpers


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def append_csv(path: Path, header, row) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        w.writerow([_fmt(v) for v in row])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_FIELDS:
            raise ValueError(f"{path}: header {reader.fieldnames} does not match the metrics schema")
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in reader]


def _truncate_csv(path: Path, max_step: int) -> None:
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= max_step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


def write_config(out_dir: Path, cfg: RunConfig) -> None:
    (out_dir / "config.json").write_text(dumps_config(cfg))


# ---------------------------------------------------------------------------
# datasets


def load_training_dataset(cfg: RunConfig) -> DemoDataset:
    path = cfg.paths.dataset
    if path is None:
        raise MissingDatasetError(
            f"this run needs expert demonstrations; create them with "
            f"`dmfd gen-demos --task {cfg.env.task} --out demos.bin` and pass --dataset demos.bin"
        )
    if not Path(path).exists():
        raise MissingDatasetError(f"dataset file {path} does not exist; create it with `dmfd gen-demos --task {cfg.env.task} --out {path}`")
    ds = load_dataset(path)
    check_dataset_matches(ds, cfg.env)
    return duplicate_episodes(ds, cfg.demos.duplicate)


def check_dataset_matches(ds: DemoDataset, env: EnvConfig) -> None:
    stored = replace(config_from_meta(ds.meta), obs_mode=env.obs_mode)
    if stored != env:
        diff = [f.name for f in fields(EnvConfig) if getattr(stored, f.name) != getattr(env, f.name)]
        raise TrainingError(f"dataset was generated with a different environment config (fields differ: {', '.join(diff)})")


# ---------------------------------------------------------------------------
# training


@dataclass
class RunResult:
    seed: int
    out_dir: Path
    final: dict


def _needs_dataset(cfg: RunConfig, agent: AgentConfig) -> bool:
    if cfg.baseline is not None and (baseline_spec(cfg.baseline).supervised or baseline_spec(cfg.baseline).init_from_bc):
        return True
    return agent.needs_dataset


def effective_agent_config(cfg: RunConfig) -> AgentConfig:
    if cfg.baseline is None:
        return cfg.agent
    return baseline_spec(cfg.baseline).project(cfg.agent)


def _checkpoint_dir(out_dir: Path) -> Path:
    return out_dir / "checkpoints"


def latest_checkpoint(out_dir: Path) -> Path | None:
    found = sorted(_checkpoint_dir(out_dir).glob("step_*.json"))
    return found[-1] if found else None


def save_checkpoint(out_dir: Path, cfg: RunConfig, doc: dict) -> Path:
    ckdir = _checkpoint_dir(out_dir)
    ckdir.mkdir(parents=True, exist_ok=True)
    path = ckdir / f"step_{doc['step']:09d}.json"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"config": dump_config(cfg), **doc}))
    os.replace(tmp, path)
    for old in sorted(ckdir.glob("step_*.json"))[:-KEEP_CHECKPOINTS]:
        old.unlink()
    return path


def load_checkpoint(path) -> tuple[RunConfig, AgentNets, dict]:
    doc = json.loads(Path(path).read_text())
    cfg = parse_config(doc["config"])
    agent = effective_agent_config(cfg)
    nets = AgentNets.from_document(make_specs(cfg.env, agent), doc["nets"])
    return cfg, nets, doc


def _final_eval(out_dir: Path, nets: AgentNets, cfg: RunConfig, agent: AgentConfig, seed: int) -> dict:
    records = evaluate(nets, cfg.env, cfg.final_eval_episodes, seed + EVAL_SEED_OFFSET, agent)
    write_records(out_dir / "final_eval.csv", records)
    summary = summarize(records)
    (out_dir / "final_eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def write_records(path: Path, records: list[EvalRecord]) -> None:
    write_csv(path, ("episode", "p_start", "p_end", "p_hat"), [(i, r.p_start, r.p_end, r.p_hat) for i, r in enumerate(records)])


def train_seed(cfg: RunConfig, seed: int, out_dir: Path, resume: bool = False) -> RunResult:
    """One training run; writes metrics.csv, timing.csv, checkpoints and the final evaluation into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(out_dir, cfg)
    agent = effective_agent_config(cfg)
    dataset = load_training_dataset(cfg) if _needs_dataset(cfg, agent) else None
    spec = baseline_spec(cfg.baseline) if cfg.baseline else None

    if spec is not None and spec.supervised:
        return _train_bc(cfg, agent, dataset, seed, out_dir)

    initial_actor = None
    if spec is not None and spec.init_from_bc:
        initial_actor, _ = bc_train(dataset, agent.obs_mode, cfg.bc.epochs, seed, lr=cfg.bc.lr, agent_config=agent, env_config=cfg.env)

    trainer = Trainer(cfg.env, agent, dataset, seed, cfg.eval_every, cfg.eval_episodes, initial_actor)
    metrics_path, timing_path = out_dir / "metrics.csv", out_dir / "timing.csv"
    if resume and (ck := latest_checkpoint(out_dir)) is not None:
        _, _, doc = load_checkpoint(ck)
        trainer.restore(doc)
        _truncate_csv(metrics_path, trainer.step)
        _truncate_csv(timing_path, trainer.step)
        log.info("resumed seed %d from %s at step %d", seed, ck, trainer.step)
    else:
        for p in (metrics_path, timing_path):
            p.unlink(missing_ok=True)

    def on_eval(tr: Trainer, row: MetricsRow) -> None:
        append_csv(metrics_path, METRICS_FIELDS, [getattr(row, k) for k in METRICS_FIELDS])
        append_csv(timing_path, TIMING_FIELDS, [row.step, row.wall_seconds])
        save_checkpoint(out_dir, cfg, tr.checkpoint_document())
        log.info("seed %d step %d: mean p_hat %.3f", seed, row.step, row.mean_p_hat)

    trainer.run(cfg.budget_steps, on_eval)
    final = _final_eval(out_dir, trainer.nets, cfg, agent, seed)
    return RunResult(seed, out_dir, final)


def _train_bc(cfg: RunConfig, agent: AgentConfig, dataset: DemoDataset, seed: int, out_dir: Path) -> RunResult:
    t0 = time.perf_counter()
    params, curve = bc_train(dataset, agent.obs_mode, cfg.bc.epochs, seed, lr=cfg.bc.lr, agent_config=agent, env_config=cfg.env)
    nets = bc_nets(params, cfg.env, agent.obs_mode, seed, agent)
    records = evaluate(nets, cfg.env, cfg.eval_episodes, seed + EVAL_SEED_OFFSET, agent)
    s = summarize(records)
    n_updates = cfg.bc.epochs * math.ceil(dataset.n_transitions() / agent.batch_size)
    loss = curve[-1] if curve else math.nan
    row = MetricsRow(n_updates, s["mean"], s["std"], s["median"], s["q25"], s["q75"], loss, math.nan, math.nan, time.perf_counter() - t0)
    write_csv(out_dir / "metrics.csv", METRICS_FIELDS, [[getattr(row, k) for k in METRICS_FIELDS]])
    write_csv(out_dir / "timing.csv", TIMING_FIELDS, [[row.step, row.wall_seconds]])
    write_csv(out_dir / "bc_loss.csv", ("epoch", "loss"), list(enumerate(curve, 1)))
    doc = {"step": n_updates, "seed": seed, "episode_index": 0, "rsi_resets": 0, "offline_done": True, "rng_state": None, "nets": nets.to_document()}
    save_checkpoint(out_dir, cfg, doc)
    final = _final_eval(out_dir, nets, cfg, agent, seed)
    return RunResult(seed, out_dir, final)


def _train_seed_job(args) -> RunResult:
    doc, seed, out_dir, resume = args
    return train_seed(parse_config(doc), seed, Path(out_dir), resume)


def worker_count() -> int:
    raw = os.environ.get("DMFD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("DMFD_THREADS", f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("DMFD_THREADS", f"expected a positive integer, got {n}")
    return n


def run_jobs(jobs: list[tuple[RunConfig, int, Path, bool]]) -> list[RunResult]:
    """Run independent training jobs, in worker processes when DMFD_THREADS > 1."""
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [train_seed(cfg, seed, out, resume) for cfg, seed, out, resume in jobs]
    payload = [(dump_config(cfg), seed, str(out), resume) for cfg, seed, out, resume in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_seed_job, payload))


def seed_dir(root: Path, seed: int) -> Path:
    return root / f"seed_{seed}"


# ---------------------------------------------------------------------------
# evaluation of a checkpoint


def eval_checkpoint(path, n_episodes: int, seed: int, expect: RunConfig | None = None) -> tuple[list[EvalRecord], dict]:
    cfg, nets, _ = load_checkpoint(path)
    if expect is not None:
        for section in ("env", "agent", "baseline"):
            if getattr(expect, section) != getattr(cfg, section):
                raise ConfigError(section, f"checkpoint {path} was trained with a different {section} configuration")
    records = evaluate(nets, cfg.env, n_episodes, seed, effective_agent_config(cfg))
    return records, summarize(records)


# ---------------------------------------------------------------------------
# ablations

ABLATIONS = ("entropy", "rsi", "crop", "dataset_size", "critic_input")


@dataclass(frozen=True)
class AblationCell:
    name: str
    agent_changes: dict
    n_episodes: int | None = None  # unique demonstrations for dataset_size cells
    duplicate: int | None = None


def ablation_grid(name: str, base: RunConfig) -> tuple[RunConfig, list[AblationCell]]:
    """Base config (observation mode fixed where the ablation needs one) and its cells."""
    if name not in ABLATIONS:
        raise ConfigError("ablation", f"unknown ablation {name!r}; valid names: {', '.join(ABLATIONS)}")
    agent = base.agent

    def with_obs(cfg: RunConfig, obs: str) -> RunConfig:
        return with_overrides(cfg, obs=obs)

    if name == "entropy":
        base = with_obs(base, "state")
        cells = [AblationCell("entropy_on", {"entropy_reg_enabled": True}), AblationCell("entropy_off", {"entropy_reg_enabled": False})]
    elif name == "rsi":
        cells = [
            AblationCell("rsi_off", {"rsi_enabled": False}),
            AblationCell("rsi_always", {"rsi_enabled": True, "p_eta": 1.0}),
            AblationCell("rsi_probabilistic", {"rsi_enabled": True, "p_eta": agent.p_eta}),
        ]
    elif name == "crop":
        base = with_obs(base, "image")
        cells = [AblationCell("crop_on", {"crop_enabled": True}), AblationCell("crop_off", {"crop_enabled": False})]
    elif name == "critic_input":
        base = with_obs(base, "image")
        cells = [AblationCell(f"critic_{c}", {"critic_input": c}) for c in ("state", "image", "state_plus_image")]
    else:
        cells = [
            AblationCell("episodes_100x80", {}, 100, 80),
            AblationCell("episodes_1000", {}, 1000, 1),
            AblationCell("episodes_4000", {}, 4000, 1),
            AblationCell("episodes_8000", {}, 8000, 1),
        ]
    return base, cells


def ablation_jobs(name: str, base: RunConfig, out_root: Path, seeds: tuple[int, ...]) -> list[tuple[RunConfig, int, Path, bool]]:
    base, cells = ablation_grid(name, base)
    jobs = []
    dataset_cache: dict[int, str] = {}
    for cell in cells:
        cfg = replace(base, agent=replace(base.agent, **cell.agent_changes))
        if cell.n_episodes is not None:
            path = dataset_cache.get(cell.n_episodes)
            if path is None:
                path = str(ensure_dataset(base, cell.n_episodes, out_root / "datasets"))
                dataset_cache[cell.n_episodes] = path
            cfg = replace(cfg, paths=replace(cfg.paths, dataset=path), demos=replace(cfg.demos, n_episodes=cell.n_episodes, duplicate=cell.duplicate))
        elif cfg.paths.dataset is None and _needs_dataset(cfg, effective_agent_config(cfg)):
            path = ensure_dataset(base, base.demos.n_episodes, out_root / "datasets")
            cfg = replace(cfg, paths=replace(cfg.paths, dataset=str(path)))
        cell_dir = out_root / name / cell.name
        for seed in seeds:
            jobs.append((replace(cfg, seeds=(seed,), paths=replace(cfg.paths, output_dir=str(cell_dir))), seed, seed_dir(cell_dir, seed), False))
    return jobs


def ensure_dataset(cfg: RunConfig, n_episodes: int, directory: Path) -> Path:
    """Generate (or reuse) a demonstration file with ``n_episodes`` unique episodes."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{cfg.env.task}_{n_episodes}_seed{cfg.demos.seed}.bin"
    if path.exists():
        ds = load_dataset(path)
        if ds.n_episodes == n_episodes:
            check_dataset_matches(ds, cfg.env)
            return path
    ds = generate_demonstrations(replace(cfg.env, obs_mode="state"), n_episodes, cfg.demos.seed, cfg.demos.filter_threshold)
    save_dataset(ds, path)
    return path


# ---------------------------------------------------------------------------
# learning curves


@dataclass
class Curve:
    label: str
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_runs: int


def aggregate_curves(label: str, runs: list[list[dict]], column: str = "mean_p_hat") -> tuple[Curve, bool]:
    """Mean and std across runs at each step.

    Runs with different step grids are linearly resampled onto the coarsest grid
    (fewest points); the second return value says whether that happened.
    """
    if not runs or any(not r for r in runs):
        raise ValueError(f"{label}: every run needs at least one metrics row")
    grids = [np.array([row["step"] for row in r], dtype=np.float64) for r in runs]
    values = [np.array([row[column] for row in r], dtype=np.float64) for r in runs]
    resampled = any(len(g) != len(grids[0]) or not np.array_equal(g, grids[0]) for g in grids)
    if resampled:
        target = min(grids, key=len)
        values = [np.interp(target, g, v) for g, v in zip(grids, values)]
        steps = target
    else:
        steps = grids[0]
    stack = np.stack(values)
    # offsets from the first run keep identical runs exact under summation
    offsets = stack - stack[0]
    mean = stack[0] + offsets.mean(axis=0)
    return Curve(label, steps, mean, offsets.std(axis=0), len(runs)), resampled


def write_curves_csv(path: Path, curves: list[Curve]) -> None:
    rows = []
    for c in curves:
        for s, m, d in zip(c.steps, c.mean, c.std):
            rows.append((c.label, int(s), float(m), float(m - d), float(m + d), float(d), c.n_runs))
    write_csv(path, ("method", "step", "mean", "lower", "upper", "std", "n_runs"), rows)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def write_curves_svg(path: Path, curves: list[Curve], title: str = "normalized performance") -> None:
    w, h, pad = 640, 400, 50
    xmax = max(float(c.steps.max()) for c in curves) or 1.0
    lo = min(0.0, min(float((c.mean - c.std).min()) for c in curves))
    hi = max(1.0, max(float((c.mean + c.std).max()) for c in curves))

    def px(x: float, y: float) -> str:
        return f"{pad + (w - 2 * pad) * x / xmax:.2f},{h - pad - (h - 2 * pad) * (y - lo) / (hi - lo):.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<polyline points="{px(0, lo)} {px(xmax, lo)}" stroke="black" fill="none"/>',
        f'<polyline points="{px(0, lo)} {px(0, hi)}" stroke="black" fill="none"/>',
        f'<text x="{w - pad}" y="{h - 15}" text-anchor="end" font-family="sans-serif" font-size="11">step (max {int(xmax)})</text>',
    ]
    for y in (lo, 0.0, 0.5, 1.0, hi):
        parts.append(f'<text x="{pad - 5}" y="{px(0, y).split(",")[1]}" text-anchor="end" font-family="sans-serif" font-size="10">{y:.2f}</text>')
    for i, c in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        upper = [px(x, y) for x, y in zip(c.steps, c.mean + c.std)]
        lower = [px(x, y) for x, y in zip(c.steps[::-1], (c.mean - c.std)[::-1])]
        parts.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        parts.append(f'<polyline points="{" ".join(px(x, y) for x, y in zip(c.steps, c.mean))}" stroke="{color}" stroke-width="2" fill="none"/>')
        parts.append(f'<text x="{pad + 10}" y="{pad + 15 * i}" fill="{color}" font-family="sans-serif" font-size="12">{c.label}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def collect_metric_files(target: Path) -> list[Path]:
    if target.is_file():
        return [target]
    return sorted(target.rglob("metrics.csv"))
