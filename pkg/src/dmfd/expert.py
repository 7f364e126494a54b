"""Scripted full-state experts and demonstration generation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .env import DeformableEnv, EnvConfig, EnvState, Observation, normalized_performance

log = logging.getLogger(__name__)

DONE_TOL = 0.004


def _move(picker_pos: np.ndarray, target: np.ndarray, max_step: float) -> np.ndarray:
    return np.clip((target - picker_pos) / max_step, -1.0, 1.0)


def expert_action(env: DeformableEnv, state: EnvState) -> np.ndarray:
    """Deterministic oracle action computed from the full simulator state."""
    cfg = env.config
    x = state.particles.positions
    step = cfg.max_picker_step
    if cfg.is_rope:
        handle, anchor = x[0], x[-1]
        span = anchor - handle
        dist = float(np.linalg.norm(span))
        direction = -span / dist if dist > 1e-9 else np.array([1.0, 0.0])
        goal = anchor + cfg.rope_target_length * direction
        return _drive(state.pickers[0], 0, handle, goal, abs(dist - cfg.rope_target_length), step)

    tl, tr, bl, br = env.corner_indices()
    if cfg.task == "cloth_fold":
        pairs = [(tl, tr), (bl, br)]
    else:
        pairs = [(bl, tr)]
    err = -env.performance(state)
    parts = [_drive(pk, src, x[src], x[dst], err, step) for pk, (src, dst) in zip(state.pickers, pairs)]
    return np.concatenate(parts)


def _drive(picker, particle: int, handle: np.ndarray, goal: np.ndarray, err: float, step: float) -> np.ndarray:
    holding = picker.grasped_particle == particle
    if err <= DONE_TOL:
        return np.array([0.0, 0.0, -1.0])
    if not holding and np.linalg.norm(picker.position - handle) > 1e-9:
        # walk back to the handle empty-handed, then grab it on the next step
        d = _move(picker.position, handle, step)
        return np.array([d[0], d[1], -1.0])
    d = _move(picker.position, goal, step)
    return np.array([d[0], d[1], 1.0])


@dataclass
class Demonstration:
    env_states: list[EnvState]
    observations: list[Observation]
    actions: list[np.ndarray]
    rewards: list[float]
    p_hat_final: float

    @property
    def horizon(self) -> int:
        return len(self.actions)


@dataclass
class DemoDataset:
    meta: dict
    episodes: list[Demonstration] = field(default_factory=list)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    def n_transitions(self) -> int:
        return sum(ep.horizon for ep in self.episodes)


class ExpertFailureError(RuntimeError):
    pass


def episode_seed(seed: int, index: int) -> int:
    """Per-episode seed, independent of how episodes are scheduled."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def rollout_expert(env: DeformableEnv, seed: int) -> Demonstration:
    state, obs = env.reset(seed)
    p0 = env.performance(state)
    states, observations, actions, rewards = [state], [obs], [], []
    done = False
    while not done:
        action = expert_action(env, state)
        state, reward, done, obs = env.step(state, action)
        states.append(state)
        observations.append(obs)
        actions.append(action)
        rewards.append(reward)
    p_hat = normalized_performance(env.performance(state), p0, env.config.p_opt)
    return Demonstration(states, observations, actions, rewards, p_hat)


def generate_demonstrations(
    config: EnvConfig,
    n_episodes: int,
    seed: int,
    filter_threshold: float = 0.5,
) -> DemoDataset:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env = DeformableEnv(config)
    episodes: list[Demonstration] = []
    attempts = 0
    max_attempts = 10 * n_episodes
    while len(episodes) < n_episodes:
        if attempts >= max_attempts:
            rate = 1.0 - len(episodes) / attempts
            raise ExpertFailureError(
                f"expert reached only {len(episodes)}/{n_episodes} episodes above p_hat {filter_threshold} "
                f"in {attempts} attempts (failure rate {rate:.1%})"
            )
        demo = rollout_expert(env, episode_seed(seed, attempts))
        attempts += 1
        if demo.p_hat_final >= filter_threshold:
            episodes.append(demo)
    if attempts > n_episodes:
        log.info("discarded %d expert episodes below p_hat %.2f", attempts - n_episodes, filter_threshold)
    meta = {
        "task": config.task,
        "config": config.to_dict(),
        "n_episodes": n_episodes,
        "horizon": config.horizon,
        "seed": seed,
        "filter_threshold": filter_threshold,
        "duplicated": 1,
    }
    return DemoDataset(meta, episodes)


def duplicate_episodes(ds: DemoDataset, times: int) -> DemoDataset:
    if times < 1:
        raise ValueError("times must be >= 1")
    if times == 1:
        return ds
    meta = dict(ds.meta)
    meta["n_episodes"] = ds.n_episodes * times
    meta["duplicated"] = int(ds.meta.get("duplicated", 1)) * times
    meta["unique_episodes"] = int(ds.meta.get("unique_episodes", ds.n_episodes))
    return DemoDataset(meta, [ep for _ in range(times) for ep in ds.episodes])
