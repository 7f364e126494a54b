"""Run configuration documents (JSON) with strict key and type checking."""

from __future__ import annotations

import json
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .agent import AgentConfig
from .baselines import BASELINES
from .env import EnvConfig


class ConfigError(ValueError):
    """Bad configuration document; ``path`` is the dotted key that caused it."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class DemoSettings:
    n_episodes: int = 100
    duplicate: int = 80
    seed: int = 0
    filter_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        if self.duplicate < 1:
            raise ValueError("duplicate must be >= 1")


@dataclass(frozen=True)
class BcSettings:
    # one epoch over the duplicated 8000-episode buffer is ~1900 minibatches,
    # so 21 epochs roughly matches the 40k gradient updates of an RL run
    epochs: int = 21
    lr: float = 1e-3

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass(frozen=True)
class Paths:
    dataset: str | None = None
    output_dir: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    baseline: str | None = None
    budget_steps: int = 40_000
    eval_every: int = 2000
    eval_episodes: int = 20
    final_eval_episodes: int = 100
    seeds: tuple[int, ...] = (0,)
    demos: DemoSettings = field(default_factory=DemoSettings)
    bc: BcSettings = field(default_factory=BcSettings)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self) -> None:
        if self.baseline is not None and self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES} or null, got {self.baseline!r}")
        if self.budget_steps < 0:
            raise ValueError("budget_steps must be >= 0")
        if self.eval_every < 1 or self.eval_episodes < 1 or self.final_eval_episodes < 1:
            raise ValueError("eval_every, eval_episodes and final_eval_episodes must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")


# ---------------------------------------------------------------------------
# generic dataclass <-> document conversion


def _type_hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _check_value(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(path, "must not be null")
        inner = [a for a in args if a is not type(None)]
        return _check_value(value, inner[0], path)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_check_value(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_check_value(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    raise ConfigError(path, f"unsupported field type {tp}")


def _build(cls, doc: dict, path: str = ""):
    hints = _type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in doc:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(where, f"unknown key (valid keys: {', '.join(sorted(names))})")
    kwargs = {}
    for f in fields(cls):
        if f.name in doc:
            kwargs[f.name] = _check_value(doc[f.name], hints[f.name], f"{path}.{f.name}" if path else f.name)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path or cls.__name__, str(exc)) from None


def _to_document(obj):
    if is_dataclass(obj):
        return {f.name: _to_document(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_document(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# public api


def parse_config(document: dict | str | None) -> RunConfig:
    """Validate a config document (dict or JSON text) and apply defaults."""
    if document is None:
        document = {}
    if isinstance(document, str):
        try:
            document = json.loads(document) if document.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"not valid JSON: {exc}") from None
    if not isinstance(document, dict):
        raise ConfigError("", "top level must be an object")
    return _build(RunConfig, document)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> dict:
    """Fully resolved document; ``parse_config(dump_config(c)) == c``."""
    return _to_document(cfg)


def dumps_config(cfg: RunConfig) -> str:
    return json.dumps(dump_config(cfg), indent=2, sort_keys=True) + "\n"


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    """Apply command-line overrides; ``task`` and ``obs`` are routed to the env/agent sections."""
    env, agent = cfg.env, cfg.agent
    task = changes.pop("task", None)
    obs = changes.pop("obs", None)
    if task is not None and task != env.task:
        # likewise for the spring model, which defaults per task
        old_env = EnvConfig(task=env.task)
        derived = {"compression_ratio": None} if env.compression_ratio == old_env.compression_ratio else {}
        try:
            env = replace(env, task=task, **derived)
        except ValueError as exc:
            raise ConfigError("env.task", str(exc)) from None
    if obs is not None and obs != agent.obs_mode:
        # mode-dependent settings left at the old mode's default follow the new mode
        old = AgentConfig(obs_mode=agent.obs_mode)
        moved = {k: None for k in ("critic_input", "p_eta", "batch_size") if getattr(agent, k) == getattr(old, k)}
        agent = replace(agent, obs_mode=obs, **moved)
    dataset = changes.pop("dataset", None)
    out = changes.pop("output_dir", None)
    paths = cfg.paths
    if dataset is not None:
        paths = replace(paths, dataset=dataset)
    if out is not None:
        paths = replace(paths, output_dir=out)
    try:
        return replace(cfg, env=env, agent=agent, paths=paths, **changes)
    except ValueError as exc:
        raise ConfigError("", str(exc)) from None
