"""Baselines as AgentConfig projections, plus a behaviour-cloning trainer."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .agent import AgentConfig, AgentNets, init_nets, make_specs
from .dataset import config_from_meta
from .env import DeformableEnv, EnvConfig
from .expert import DemoDataset

BASELINES = ("sac", "sac_lfd", "awac_like", "bc_state", "bc_image", "sac_bc")
AWAC_OFFLINE_UPDATES = 5000
SAC_RANDOM_STEPS = 1000


class UnknownBaselineError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineSpec:
    name: str
    deltas: dict
    description: str
    supervised: bool = False
    init_from_bc: bool = False

    def project(self, base: AgentConfig) -> AgentConfig:
        return replace(base, **self.deltas)


_SAC = {"actor_loss": "sac", "use_expert_data": False, "rsi_enabled": False, "init_random_steps": SAC_RANDOM_STEPS}

_SPECS = {
    "sac": BaselineSpec("sac", dict(_SAC), "soft actor-critic without demonstrations"),
    "sac_lfd": BaselineSpec("sac_lfd", {**_SAC, "use_expert_data": True, "init_random_steps": 0}, "SAC with an expert-prepopulated replay buffer"),
    "awac_like": BaselineSpec(
        "awac_like",
        {"entropy_reg_enabled": False, "rsi_enabled": False, "crop_enabled": False, "offline_updates": AWAC_OFFLINE_UPDATES},
        "advantage-weighted actor, offline phase on expert data then online fine-tuning",
    ),
    "bc_state": BaselineSpec("bc_state", {"obs_mode": "state", "critic_input": "state"}, "behaviour cloning on reduced states", supervised=True),
    "bc_image": BaselineSpec("bc_image", {"obs_mode": "image", "critic_input": "state_plus_image"}, "behaviour cloning on images", supervised=True),
    # sac_bc keeps the base observation mode; the actor comes from a BC checkpoint
    "sac_bc": BaselineSpec("sac_bc", {**_SAC, "init_random_steps": 0}, "SAC with the actor initialised from behaviour cloning", init_from_bc=True),
}


def baseline_spec(name: str) -> BaselineSpec:
    try:
        return _SPECS[name]
    except KeyError:
        raise UnknownBaselineError(f"unknown baseline {name!r}; valid names: {', '.join(BASELINES)}") from None


def project_config(name: str, base: AgentConfig) -> AgentConfig:
    return baseline_spec(name).project(base)


# ---------------------------------------------------------------------------
# behaviour cloning


def bc_arrays(dataset: DemoDataset, obs_mode: str, env_config: EnvConfig | None = None):
    """Stacked (states, images or None, actions) over every demonstration step."""
    env = DeformableEnv(replace(env_config or config_from_meta(dataset.meta), obs_mode="both" if obs_mode == "image" else "state"))
    cache: dict[int, tuple] = {}
    states, images, actions = [], [], []
    for ep in dataset.episodes:
        key = id(ep)
        if key not in cache:
            obs = [env.observe(s) for s in ep.env_states[:-1]]
            cache[key] = (
                np.stack([o.state_vector for o in obs]),
                np.stack([o.image for o in obs]) if obs_mode == "image" else None,
                np.stack(ep.actions),
            )
        s, im, a = cache[key]
        states.append(s)
        actions.append(a)
        if im is not None:
            images.append(im)
    return np.concatenate(states), (np.concatenate(images) if images else None), np.concatenate(actions)


def bc_loss_and_grads(params: nn.ParamSet, specs, states, images, actions) -> tuple[float, dict[str, np.ndarray]]:
    """MSE between the squashed policy mean and the expert action."""
    from .agent import actor_backward, actor_forward

    mean, log_std, cache = actor_forward(params, specs, states, images)
    pred = np.tanh(mean)
    err = pred - actions
    loss = float(np.mean(err**2))
    dmean = 2.0 * err * (1.0 - pred**2) / err.size
    return loss, actor_backward(cache, dmean, np.zeros_like(log_std))


def bc_train(
    dataset: DemoDataset,
    obs_mode: str,
    epochs: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int | None = None,
    agent_config: AgentConfig | None = None,
    env_config: EnvConfig | None = None,
) -> tuple[nn.ParamSet, list[float]]:
    """Train an actor network by regression onto expert actions.

    The network has the same layout as the agent's actor so the result can seed
    ``sac_bc``. Returns the parameters and the mean loss of each epoch.
    """
    if dataset.n_episodes == 0:
        raise ValueError("behaviour cloning needs a non-empty dataset")
    env_config = env_config or config_from_meta(dataset.meta)
    config = agent_config or AgentConfig(obs_mode=obs_mode)
    if config.obs_mode != obs_mode:
        config = replace(config, obs_mode=obs_mode, critic_input=None)
    rng = np.random.default_rng(seed)
    specs = make_specs(env_config, config)
    params = init_nets(specs, rng).actor
    curve: list[float] = []
    if epochs <= 0:
        return params, curve

    states, images, actions = bc_arrays(dataset, obs_mode, env_config)
    states = states * np.asarray(specs.state_scale)
    n = len(actions)
    bs = min(batch_size or config.batch_size, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            im = images[idx].astype(np.float64) / 255.0 if images is not None else None
            loss, grads = bc_loss_and_grads(params, specs, states[idx], im, actions[idx])
            params = nn.adam_step(params, grads, lr)
            total += loss * len(idx)
        curve.append(total / n)
    return params, curve


def bc_nets(params: nn.ParamSet, env_config: EnvConfig, obs_mode: str, seed: int = 0, agent_config: AgentConfig | None = None) -> AgentNets:
    """Wrap a BC actor in AgentNets so the shared evaluation path can run it."""
    config = agent_config or AgentConfig(obs_mode=obs_mode)
    if config.obs_mode != obs_mode:
        config = replace(config, obs_mode=obs_mode, critic_input=None)
    specs = make_specs(env_config, config)
    return replace(init_nets(specs, np.random.default_rng(seed)), actor=params.copy())
