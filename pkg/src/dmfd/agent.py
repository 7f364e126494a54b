"""DMfD learner: expert replay, probabilistic RSI, random crops, twin critics,
advantage-weighted actor with entropy regularisation.

The same machinery runs the SAC-family baselines; they differ only through
AgentConfig (see ``baselines.project_config``).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterator

import numpy as np

from . import nn
from .env import DeformableEnv, EnvConfig, EnvState, EvalRecord, Observation, normalized_performance
from .expert import DemoDataset, episode_seed

log = logging.getLogger(__name__)

CRITIC_INPUTS = ("state", "image", "state_plus_image")
ACTOR_LOSSES = ("awr", "sac")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    pass


class BufferCapacityError(ValueError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.9
    reward_scale: float = 50.0  # per-step rewards are O(1e-2); keeps the entropy bonus from dominating Q
    w_E: float = 0.1
    c_ent: float = 0.5
    p_eta: float | None = None  # 0.2 for state, 0.3 for image observations
    awr_temperature: float = 1.0
    awr_clamp: float = 5.0
    awr_action_clip: float = 0.999
    n_action_samples: int = 4
    batch_size: int | None = None  # 128 state / 64 image
    target_tau: float = 0.005
    crop_pad: int = 4
    critic_input: str | None = None  # state in state mode, state_plus_image in image mode
    obs_mode: str = "state"
    rsi_enabled: bool = True
    entropy_reg_enabled: bool = True
    crop_enabled: bool = True
    actor_loss: str = "awr"
    use_expert_data: bool = True
    offline_updates: int = 0
    init_random_steps: int = 0
    lr: float = 3e-4
    # False: one learned log-std per action dimension, shared by all states
    state_dependent_std: bool = False
    hidden_width: int = 64
    n_hidden: int = 2
    encoder_conv_layers: int = 3
    encoder_channels: int = 8
    encoder_kernel: int = 3
    encoder_stride: int = 2
    encoder_dense_width: int = 128
    replay_capacity: int = 300_000

    def __post_init__(self) -> None:
        if self.obs_mode not in ("state", "image"):
            raise ValueError(f"obs_mode must be 'state' or 'image', got {self.obs_mode!r}")
        if self.p_eta is None:
            object.__setattr__(self, "p_eta", 0.2 if self.obs_mode == "state" else 0.3)
        if self.batch_size is None:
            object.__setattr__(self, "batch_size", 128 if self.obs_mode == "state" else 64)
        if self.critic_input is None:
            object.__setattr__(self, "critic_input", "state" if self.obs_mode == "state" else "state_plus_image")
        if self.critic_input not in CRITIC_INPUTS:
            raise ValueError(f"critic_input must be one of {CRITIC_INPUTS}")
        if self.actor_loss not in ACTOR_LOSSES:
            raise ValueError(f"actor_loss must be one of {ACTOR_LOSSES}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.p_eta <= 1.0:
            raise ValueError(f"p_eta must lie in [0, 1], got {self.p_eta}")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be > 0")
        if self.awr_temperature <= 0:
            raise ValueError("awr_temperature must be > 0")
        if not 0.0 <= self.target_tau <= 1.0:
            raise ValueError("target_tau must lie in [0, 1]")
        if self.crop_pad < 0 or self.batch_size < 1 or self.n_action_samples < 1:
            raise ValueError("crop_pad >= 0, batch_size >= 1 and n_action_samples >= 1 required")

    @property
    def uses_images(self) -> bool:
        return self.obs_mode == "image" or self.critic_input != "state"

    @property
    def needs_dataset(self) -> bool:
        return self.use_expert_data or (self.rsi_enabled and self.p_eta > 0)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# replay buffer


@dataclass
class Transition:
    obs: Observation
    action: np.ndarray
    reward: float
    next_obs: Observation
    done: bool
    is_expert: bool = False


@dataclass
class Batch:
    states: np.ndarray
    images: np.ndarray | None
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_images: np.ndarray | None
    dones: np.ndarray
    is_expert: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class ReplayBuffer:
    """FIFO ring of transitions stored column-wise.

    Images live in a separate pool and transitions hold indices into it, so
    duplicated demonstrations share one copy of each frame. Online frames use
    a ring region of the pool that is only overwritten after the owning
    transition has itself been evicted.
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int, with_images: bool):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.with_images = with_images
        self.write_index = 0
        self.size = 0
        self._states = np.zeros((capacity, state_dim))
        self._next_states = np.zeros((capacity, state_dim))
        self._actions = np.zeros((capacity, action_dim))
        self._rewards = np.zeros(capacity)
        self._dones = np.zeros(capacity)
        self._expert = np.zeros(capacity, dtype=bool)
        if with_images:
            self._image_refs = np.zeros((capacity, 2), dtype=np.int64)
            self._static = np.zeros((0, 32, 32, 3), dtype=np.uint8)
            self._ring = np.zeros((0, 32, 32, 3), dtype=np.uint8)
            self._online_count = 0

    def __len__(self) -> int:
        return self.size

    def register_images(self, images: np.ndarray) -> np.ndarray:
        """Store frames that will be shared by several transitions; returns pool indices."""
        base = len(self._static)
        self._static = np.concatenate([self._static, np.asarray(images, dtype=np.uint8)])
        return np.arange(base, base + len(images))

    def _ring_slot(self, images: tuple[np.ndarray, np.ndarray]) -> tuple[int, int]:
        pos = (2 * self._online_count) % (2 * self.capacity)
        if pos + 2 > len(self._ring):
            grow = min(max(2 * len(self._ring), 1024), 2 * self.capacity)
            self._ring = np.concatenate([self._ring, np.zeros((grow - len(self._ring), 32, 32, 3), dtype=np.uint8)])
        self._ring[pos] = images[0]
        self._ring[pos + 1] = images[1]
        self._online_count += 1
        return -(pos + 1), -(pos + 2)

    def _pool(self, refs: np.ndarray) -> np.ndarray:
        out = np.empty(refs.shape + (32, 32, 3), dtype=np.uint8)
        static = refs >= 0
        out[static] = self._static[refs[static]]
        out[~static] = self._ring[-refs[~static] - 1]
        return out

    def add(self, tr: Transition, image_refs: tuple[int, int] | None = None) -> None:
        i = self.write_index
        self._states[i] = tr.obs.state_vector
        self._next_states[i] = tr.next_obs.state_vector
        self._actions[i] = tr.action
        self._rewards[i] = tr.reward
        self._dones[i] = float(tr.done)
        self._expert[i] = tr.is_expert
        if self.with_images:
            if image_refs is None:
                image_refs = self._ring_slot((tr.obs.image, tr.next_obs.image))
            self._image_refs[i] = image_refs
        self.write_index = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ordered_indices(self) -> np.ndarray:
        """Storage slots from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.write_index) % self.capacity

    def transition(self, slot: int) -> Transition:
        images = self._pool(self._image_refs[slot]) if self.with_images else (None, None)
        mode = "both" if self.with_images else "state"
        return Transition(
            Observation(mode, self._states[slot].copy(), np.zeros(0), images[0]),
            self._actions[slot].copy(),
            float(self._rewards[slot]),
            Observation(mode, self._next_states[slot].copy(), np.zeros(0), images[1]),
            bool(self._dones[slot]),
            bool(self._expert[slot]),
        )

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=n)

    def sample_batch(self, n: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(n, rng)
        images = next_images = None
        if self.with_images:
            pooled = self._pool(self._image_refs[idx])
            images, next_images = pooled[:, 0], pooled[:, 1]
        return Batch(
            self._states[idx],
            images,
            self._actions[idx],
            self._rewards[idx],
            self._next_states[idx],
            next_images,
            self._dones[idx],
            self._expert[idx],
        )


def demo_transitions(ep, env: DeformableEnv) -> list[Transition]:
    mode = "both" if env.config.obs_mode != "state" else "state"
    obs = [env.observe(s, mode) for s in ep.env_states]
    out = []
    for t, action in enumerate(ep.actions):
        done = ep.env_states[t + 1].step_index >= env.config.horizon
        out.append(Transition(obs[t], np.asarray(action, dtype=np.float64), float(ep.rewards[t]), obs[t + 1], done, True))
    return out


def prepopulate(buffer: ReplayBuffer, dataset: DemoDataset, env: DeformableEnv) -> ReplayBuffer:
    """Append every demonstration step as an expert transition, in dataset order."""
    needed = dataset.n_transitions()
    if needed > buffer.capacity:
        raise BufferCapacityError(f"replay capacity {buffer.capacity} is too small for {needed} expert transitions")
    # duplicated datasets repeat episode objects; render and store each unique episode once
    cache: dict[int, tuple[list[Transition], np.ndarray | None]] = {}
    for ep in dataset.episodes:
        key = id(ep)
        if key not in cache:
            trs = demo_transitions(ep, env)
            refs = None
            if buffer.with_images and trs:
                refs = buffer.register_images(np.stack([trs[0].obs.image] + [tr.next_obs.image for tr in trs]))
            cache[key] = (trs, refs)
        trs, refs = cache[key]
        for t, tr in enumerate(trs):
            buffer.add(tr, None if refs is None else (refs[t], refs[t + 1]))
    return buffer


# ---------------------------------------------------------------------------
# reference state initialisation and augmentation


def maybe_rsi_reset(
    env: DeformableEnv,
    dataset: DemoDataset | None,
    p_eta: float,
    rng: np.random.Generator,
    reset_seed: int,
) -> tuple[EnvState, Observation, bool]:
    """With probability p_eta restart from a uniformly chosen demonstration state.

    Returns (state, observation, used_demo_state).
    """
    if p_eta > 0 and dataset is not None and dataset.n_episodes and rng.random() < p_eta:
        ep = dataset.episodes[int(rng.integers(dataset.n_episodes))]
        t = int(rng.integers(ep.horizon))
        state, obs = env.reset_to(ep.env_states[t])
        return state, obs, True
    state, obs = env.reset(reset_seed)
    return state, obs, False


def random_crop(image: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    if pad == 0:
        return image
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    return padded[top : top + h, left : left + w]


def random_crop_batch(images: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Independent crop offsets per image of an NHWC batch."""
    if pad == 0:
        return images
    b, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    rows = offsets[:, 0, None] + np.arange(h)[None]
    cols = offsets[:, 1, None] + np.arange(w)[None]
    return padded[np.arange(b)[:, None, None], rows[:, :, None], cols[:, None, :]]


# ---------------------------------------------------------------------------
# networks


@dataclass(frozen=True)
class NetSpecs:
    state_dim: int
    action_dim: int
    actor_input: str
    critic_input: str
    actor: nn.MlpSpec
    critic: nn.MlpSpec
    encoder: nn.ConvEncoderSpec | None
    state_scale: tuple[float, ...]
    shared_log_std: bool = False


@dataclass
class AgentNets:
    specs: NetSpecs
    actor: nn.ParamSet
    critic1: nn.ParamSet
    critic2: nn.ParamSet
    target_critic1: nn.ParamSet
    target_critic2: nn.ParamSet

    def to_document(self) -> dict:
        return {name: getattr(self, name).to_document() for name in ("actor", "critic1", "critic2", "target_critic1", "target_critic2")}

    @classmethod
    def from_document(cls, specs: NetSpecs, doc: dict) -> AgentNets:
        names = ("actor", "critic1", "critic2", "target_critic1", "target_critic2")
        return cls(specs, *(nn.ParamSet.from_document(doc[n]) for n in names))


def _state_scale(env_config: EnvConfig) -> np.ndarray:
    scale = np.full(env_config.state_obs_dim, 1.0 / env_config.camera_half_extent)
    # grasp flags are already in {0, 1}
    scale[env_config.reduced_state_dim + 2 :: 3] = 1.0
    return scale


def make_specs(env_config: EnvConfig, config: AgentConfig) -> NetSpecs:
    sd, ad = env_config.state_obs_dim, env_config.action_dim
    encoder = None
    if config.uses_images:
        encoder = nn.ConvEncoderSpec(
            n_conv_layers=config.encoder_conv_layers,
            channels=config.encoder_channels,
            kernel=config.encoder_kernel,
            stride=config.encoder_stride,
            dense_widths=(config.encoder_dense_width,),
        )
    feat = encoder.feature_size if encoder else 0
    hidden = (config.hidden_width,) * config.n_hidden
    actor_in = sd if config.obs_mode == "state" else feat
    critic_in = {"state": sd, "image": feat, "state_plus_image": feat + sd}[config.critic_input]
    if config.state_dependent_std:
        actor_spec = nn.MlpSpec((actor_in, *hidden, 2 * ad), "tanh", "gaussian_policy")
    else:
        actor_spec = nn.MlpSpec((actor_in, *hidden, ad), "tanh", "linear")
    return NetSpecs(
        sd,
        ad,
        config.obs_mode,
        config.critic_input,
        actor_spec,
        nn.MlpSpec((critic_in + ad, *hidden, 1), "tanh", "linear"),
        encoder,
        tuple(float(s) for s in _state_scale(env_config)),
        not config.state_dependent_std,
    )


def init_nets(specs: NetSpecs, rng: np.random.Generator) -> AgentNets:
    def with_encoder(mlp: nn.ParamSet, uses_image: bool) -> nn.ParamSet:
        if not uses_image:
            return mlp
        return mlp.merged(nn.init_conv_encoder(specs.encoder, rng, prefix="enc."))

    actor = with_encoder(nn.init_mlp(specs.actor, rng), specs.actor_input == "image")
    if specs.shared_log_std:
        actor = actor.merged(nn.ParamSet({"log_std": np.zeros(specs.action_dim)}))
    c1 = with_encoder(nn.init_mlp(specs.critic, rng), specs.critic_input != "state")
    c2 = with_encoder(nn.init_mlp(specs.critic, rng), specs.critic_input != "state")
    return AgentNets(specs, actor, c1, c2, c1.copy(), c2.copy())


@dataclass
class _FeatCache:
    enc: nn.ConvCache | None
    n_state: int


def _features(params: nn.ParamSet, specs: NetSpecs, kind: str, states, images) -> tuple[np.ndarray, _FeatCache]:
    parts, enc_cache = [], None
    if kind in ("image", "state_plus_image"):
        feats, enc_cache = nn.conv_encoder_forward(params, specs.encoder, images, prefix="enc.")
        parts.append(feats)
    if kind in ("state", "state_plus_image"):
        parts.append(states)
    out = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
    return out, _FeatCache(enc_cache, states.shape[1] if kind != "image" else 0)


def _features_backward(cache: _FeatCache, dfeat: np.ndarray) -> dict[str, np.ndarray]:
    if cache.enc is None:
        return {}
    width = dfeat.shape[1] - cache.n_state
    return nn.conv_encoder_backward(cache.enc, dfeat[:, :width])


def actor_forward(params: nn.ParamSet, specs: NetSpecs, states, images):
    feats, fcache = _features(params, specs, specs.actor_input, states, images)
    out, mcache = nn.mlp_forward(params, specs.actor, feats)
    if not specs.shared_log_std:
        mean, log_std = nn.split_policy_output(out)
        return mean, log_std, (fcache, mcache, None)
    row, dscale = nn.clamp_log_std(params["log_std"])
    return out, np.broadcast_to(row, out.shape).copy(), (fcache, mcache, dscale)


def actor_backward(cache, dmean: np.ndarray, dlog_std: np.ndarray) -> dict[str, np.ndarray]:
    fcache, mcache, dscale = cache
    if dscale is None:
        grads, dfeat = nn.mlp_backward(mcache, np.concatenate([dmean, dlog_std], axis=1))
    else:
        grads, dfeat = nn.mlp_backward(mcache, dmean)
        grads["log_std"] = dlog_std.sum(axis=0) * dscale
    grads.update(_features_backward(fcache, dfeat))
    return grads


def critic_features(params: nn.ParamSet, specs: NetSpecs, states, images):
    return _features(params, specs, specs.critic_input, states, images)


def critic_head(params: nn.ParamSet, specs: NetSpecs, feats: np.ndarray, actions: np.ndarray):
    q, cache = nn.mlp_forward(params, specs.critic, np.concatenate([feats, actions], axis=1))
    return q[:, 0], cache


def critic_forward(params: nn.ParamSet, specs: NetSpecs, states, images, actions):
    feats, fcache = critic_features(params, specs, states, images)
    q, hcache = critic_head(params, specs, feats, actions)
    return q, (fcache, hcache)


def critic_backward(cache, dq: np.ndarray, action_dim: int) -> tuple[dict[str, np.ndarray], np.ndarray]:
    fcache, hcache = cache
    grads, dinput = nn.mlp_backward(hcache, dq[:, None])
    grads.update(_features_backward(fcache, dinput[:, :-action_dim]))
    return grads, dinput[:, -action_dim:]


def prepare_batch(batch: Batch, specs: NetSpecs, config: AgentConfig, rng: np.random.Generator, augment: bool = True) -> Batch:
    """Scale state vectors, convert images to [0, 1] floats, apply random crops."""
    scale = np.asarray(specs.state_scale)
    images = next_images = None
    if batch.images is not None and config.uses_images:
        images, next_images = batch.images, batch.next_images
        if augment and config.crop_enabled and config.crop_pad > 0:
            images = random_crop_batch(images, config.crop_pad, rng)
            next_images = random_crop_batch(next_images, config.crop_pad, rng)
        images = images.astype(np.float64) / 255.0
        next_images = next_images.astype(np.float64) / 255.0
    return replace(batch, states=batch.states * scale, next_states=batch.next_states * scale, images=images, next_images=next_images)


# ---------------------------------------------------------------------------
# losses


def critic_loss_and_grads(nets: AgentNets, batch: Batch, config: AgentConfig, noise: np.ndarray):
    """Twin-critic squared TD error. ``noise`` drives the next-action sample."""
    specs = nets.specs
    target = td_target(nets, batch, config, noise)
    grads = []
    loss = 0.0
    for params in (nets.critic1, nets.critic2):
        q, cache = critic_forward(params, specs, batch.states, batch.images, batch.actions)
        err = q - target
        loss += float(np.mean(err**2))
        g, _ = critic_backward(cache, 2.0 * err / len(err), specs.action_dim)
        grads.append(g)
    return loss, grads[0], grads[1], target


def entropy_coef(config: AgentConfig) -> float:
    return config.c_ent if config.entropy_reg_enabled else 0.0


def td_target(nets: AgentNets, batch: Batch, config: AgentConfig, noise: np.ndarray) -> np.ndarray:
    specs = nets.specs
    mean, log_std, _ = actor_forward(nets.actor, specs, batch.next_states, batch.next_images)
    sample = nn.gaussian_policy_sample(mean, log_std, noise)
    q1, _ = critic_forward(nets.target_critic1, specs, batch.next_states, batch.next_images, sample.sampled_action)
    q2, _ = critic_forward(nets.target_critic2, specs, batch.next_states, batch.next_images, sample.sampled_action)
    soft_value = np.minimum(q1, q2) - entropy_coef(config) * sample.log_prob
    return config.reward_scale * batch.rewards + config.gamma * (1.0 - batch.dones) * soft_value


def critic_update(nets: AgentNets, batch: Batch, config: AgentConfig, rng: np.random.Generator) -> tuple[AgentNets, float]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    noise = rng.standard_normal((len(batch), nets.specs.action_dim))
    loss, g1, g2, _ = critic_loss_and_grads(nets, batch, config, noise)
    if not math.isfinite(loss):
        raise NonFiniteLossError(
            f"critic loss is {loss}; rewards in [{batch.rewards.min():.3g}, {batch.rewards.max():.3g}], batch of {len(batch)}"
        )
    c1 = nn.adam_step(nets.critic1, g1, config.lr)
    c2 = nn.adam_step(nets.critic2, g2, config.lr)
    return replace(nets, critic1=c1, critic2=c2), loss


def compute_advantage(nets: AgentNets, batch: Batch, config: AgentConfig, noise: np.ndarray) -> np.ndarray:
    """min-Q of the taken action minus its mean over ``noise.shape[0]`` policy samples."""
    specs = nets.specs
    m, b = noise.shape[0], len(batch)
    mean, log_std, _ = actor_forward(nets.actor, specs, batch.states, batch.images)
    sampled = nn.gaussian_policy_sample(np.tile(mean, (m, 1)), np.tile(log_std, (m, 1)), noise.reshape(m * b, -1)).sampled_action
    qs_taken, qs_base = [], []
    for params in (nets.critic1, nets.critic2):
        feats, _ = critic_features(params, specs, batch.states, batch.images)
        qs_taken.append(critic_head(params, specs, feats, batch.actions)[0])
        qs_base.append(critic_head(params, specs, np.tile(feats, (m, 1)), sampled)[0])
    q_taken = np.minimum(*qs_taken)
    baseline = np.minimum(*qs_base).reshape(m, b).mean(axis=0)
    return q_taken - baseline


def advantage_weights(adv: np.ndarray, config: AgentConfig) -> np.ndarray:
    if not np.all(np.isfinite(adv)):
        bad = adv[~np.isfinite(adv)][0]
        raise NonFiniteLossError(f"non-finite advantage value {bad}")
    w = np.exp(np.minimum(adv / config.awr_temperature, config.awr_clamp))
    return w / w.mean()


@dataclass
class ActorLossTerms:
    total: float
    awr: float
    entropy_term: float
    entropy: float
    grads: dict[str, np.ndarray]


def actor_loss_and_grads(
    nets: AgentNets,
    batch: Batch,
    config: AgentConfig,
    weights: np.ndarray | None,
    noise: np.ndarray,
) -> ActorLossTerms:
    """Actor objective with advantage weights held fixed.

    awr: -mean(w_i log pi(a_i|s_i)) + w_E * c_ent * mean(log pi(a~|s))
    sac: mean(c_ent * log pi(a~|s) - minQ(s, a~))
    """
    specs = nets.specs
    b = len(batch)
    mean, log_std, cache = actor_forward(nets.actor, specs, batch.states, batch.images)
    sample = nn.gaussian_policy_sample(mean, log_std, noise)
    entropy = float(-np.mean(sample.log_prob))
    dmean = np.zeros_like(mean)
    dlog_std = np.zeros_like(log_std)
    awr_loss = ent_term = 0.0

    if config.actor_loss == "awr":
        clip = config.awr_action_clip
        logp, dlp_dmean, dlp_dlogstd = nn.gaussian_log_prob(mean, log_std, np.clip(batch.actions, -clip, clip))
        awr_loss = float(-np.mean(weights * logp))
        coef = -weights[:, None] / b
        dmean += coef * dlp_dmean
        dlog_std += coef * dlp_dlogstd
        if config.entropy_reg_enabled and config.w_E != 0.0:
            scale = config.w_E * config.c_ent
            ent_term = scale * float(np.mean(sample.log_prob))
            dm, dl = nn.sample_backward(sample, np.full(b, scale / b))
            dmean += dm
            dlog_std += dl
    else:
        alpha = entropy_coef(config)
        q_min = None
        dq_da = np.zeros_like(mean)
        qs = []
        for params in (nets.critic1, nets.critic2):
            qs.append(critic_forward(params, specs, batch.states, batch.images, sample.sampled_action))
        q1, q2 = qs[0][0], qs[1][0]
        q_min = np.minimum(q1, q2)
        pick1 = q1 <= q2
        for (q, cache_c), mask in ((qs[0], pick1), (qs[1], ~pick1)):
            _, da = critic_backward(cache_c, np.where(mask, -1.0 / b, 0.0), specs.action_dim)
            dq_da += da
        awr_loss = float(-np.mean(q_min))
        ent_term = alpha * float(np.mean(sample.log_prob))
        dm, dl = nn.sample_backward(sample, np.full(b, alpha / b), dq_da)
        dmean += dm
        dlog_std += dl

    grads = actor_backward(cache, dmean, dlog_std)
    return ActorLossTerms(awr_loss + ent_term, awr_loss, ent_term, entropy, grads)


def actor_update(nets: AgentNets, batch: Batch, config: AgentConfig, rng: np.random.Generator) -> tuple[AgentNets, float, float]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    d = nets.specs.action_dim
    weights = None
    if config.actor_loss == "awr":
        adv_noise = rng.standard_normal((config.n_action_samples, len(batch), d))
        weights = advantage_weights(compute_advantage(nets, batch, config, adv_noise), config)
    noise = rng.standard_normal((len(batch), d))
    terms = actor_loss_and_grads(nets, batch, config, weights, noise)
    if not math.isfinite(terms.total):
        raise NonFiniteLossError(f"actor loss is {terms.total}")
    actor = nn.adam_step(nets.actor, terms.grads, config.lr)
    return replace(nets, actor=actor), terms.total, terms.entropy


def target_soft_update(nets: AgentNets, tau: float) -> AgentNets:
    return replace(
        nets,
        target_critic1=nn.soft_update(nets.target_critic1, nets.critic1, tau),
        target_critic2=nn.soft_update(nets.target_critic2, nets.critic2, tau),
    )


# ---------------------------------------------------------------------------
# acting and evaluation


def _obs_arrays(obs: Observation, specs: NetSpecs, config: AgentConfig):
    state = (obs.state_vector * np.asarray(specs.state_scale))[None]
    image = None
    if specs.actor_input == "image":
        image = obs.image[None].astype(np.float64) / 255.0
    return state, image


def act(nets: AgentNets, obs: Observation, config: AgentConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sampled action when ``rng`` is given, otherwise the deterministic squashed mean."""
    state, image = _obs_arrays(obs, nets.specs, config)
    mean, log_std, _ = actor_forward(nets.actor, nets.specs, state, image)
    if rng is None:
        return np.tanh(mean[0])
    return nn.gaussian_policy_sample(mean, log_std, rng.standard_normal(mean.shape)).sampled_action[0]


Policy = Callable[[DeformableEnv, EnvState, Observation], np.ndarray]


def nets_policy(nets: AgentNets, config: AgentConfig) -> Policy:
    return lambda env, state, obs: act(nets, obs, config)


def evaluate_policy(policy: Policy, env_config: EnvConfig, n_episodes: int, seed: int) -> list[EvalRecord]:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env = DeformableEnv(env_config)
    records = []
    for i in range(n_episodes):
        state, obs = env.reset(episode_seed(seed, i))
        p0 = env.performance(state)
        done = False
        while not done:
            state, _, done, obs = env.step(state, policy(env, state, obs))
        p_end = env.performance(state)
        records.append(EvalRecord(p0, p_end, normalized_performance(p_end, p0, env_config.p_opt)))
    return records


def evaluate(nets: AgentNets, env_config: EnvConfig, n_episodes: int, seed: int, config: AgentConfig | None = None) -> list[EvalRecord]:
    config = config or AgentConfig(obs_mode=nets.specs.actor_input)
    mode = "state" if nets.specs.actor_input == "state" else "image"
    return evaluate_policy(nets_policy(nets, config), replace(env_config, obs_mode=mode), n_episodes, seed)


def summarize(records: list[EvalRecord]) -> dict:
    p = np.array([r.p_hat for r in records])
    return {
        "mean": float(p.mean()),
        "std": float(p.std()),
        "median": float(np.median(p)),
        "q25": float(np.percentile(p, 25)),
        "q75": float(np.percentile(p, 75)),
        "n": len(p),
    }


# ---------------------------------------------------------------------------
# training loop


@dataclass
class MetricsRow:
    step: int
    mean_p_hat: float
    std_p_hat: float
    median: float
    q25: float
    q75: float
    actor_loss: float
    critic_loss: float
    entropy: float
    wall_seconds: float


EVAL_SEED_OFFSET = 1_000_003


class Trainer:
    """Stateful wrapper around the one-update-per-environment-step loop."""

    def __init__(
        self,
        env_config: EnvConfig,
        config: AgentConfig,
        dataset: DemoDataset | None,
        seed: int,
        eval_every: int = 2000,
        eval_episodes: int = 20,
        initial_actor: nn.ParamSet | None = None,
    ):
        if config.needs_dataset and (dataset is None or dataset.n_episodes == 0):
            raise TrainingError("this agent configuration needs an expert dataset (use_expert_data or RSI is enabled)")
        self.config = config
        self.seed = seed
        self.eval_every = eval_every
        self.eval_episodes = eval_episodes
        obs_mode = "both" if config.uses_images else "state"
        self.env_config = replace(env_config, obs_mode=obs_mode)
        self.env = DeformableEnv(self.env_config)
        self.dataset = dataset
        self.rng = np.random.default_rng(seed)
        self.specs = make_specs(env_config, config)
        self.nets = init_nets(self.specs, self.rng)
        if initial_actor is not None:
            self.nets = replace(self.nets, actor=initial_actor.copy())
        capacity = config.replay_capacity
        self.buffer = ReplayBuffer(capacity, env_config.state_obs_dim, env_config.action_dim, config.uses_images)
        if config.use_expert_data and dataset is not None:
            prepopulate(self.buffer, dataset, self.env)
        self.step = 0
        self.episode_index = 0
        self.state: EnvState | None = None
        self.obs: Observation | None = None
        self.metrics: list[MetricsRow] = []
        self._losses: list[tuple[float, float, float]] = []
        self._t0 = time.perf_counter()
        self.rsi_resets = 0
        self._offline_done = False

    # -- pieces -----------------------------------------------------------

    def _new_episode(self) -> None:
        reset_seed = episode_seed(self.seed, self.episode_index)
        p_eta = self.config.p_eta if self.config.rsi_enabled else 0.0
        self.state, self.obs, used = maybe_rsi_reset(self.env, self.dataset, p_eta, self.rng, reset_seed)
        self.rsi_resets += int(used)
        self.episode_index += 1

    def _update(self) -> None:
        cfg = self.config
        raw = self.buffer.sample_batch(cfg.batch_size, self.rng)
        batch = prepare_batch(raw, self.specs, cfg, self.rng)
        self.nets, c_loss = critic_update(self.nets, batch, cfg, self.rng)
        self.nets, a_loss, entropy = actor_update(self.nets, batch, cfg, self.rng)
        self.nets = target_soft_update(self.nets, cfg.target_tau)
        self._losses.append((a_loss, c_loss, entropy))

    def offline_phase(self) -> None:
        for _ in range(self.config.offline_updates):
            self._update()
        self._offline_done = True
        self._losses.clear()

    def env_step(self) -> None:
        if self.state is None:
            self._new_episode()
        cfg = self.config
        if self.step < cfg.init_random_steps:
            action = self.rng.uniform(-1.0, 1.0, size=self.env_config.action_dim)
        else:
            action = act(self.nets, self.obs, cfg, self.rng)
        next_state, reward, done, next_obs = self.env.step(self.state, action)
        self.buffer.add(Transition(self.obs, action, reward, next_obs, done, False))
        self.state, self.obs = next_state, next_obs
        if done:
            self.state = None
        self.step += 1
        if len(self.buffer) >= cfg.batch_size:
            self._update()

    def evaluate(self, n_episodes: int | None = None) -> list[EvalRecord]:
        return evaluate(self.nets, self.env_config, n_episodes or self.eval_episodes, self.seed + EVAL_SEED_OFFSET, self.config)

    def _metrics_row(self) -> MetricsRow:
        s = summarize(self.evaluate())
        losses = np.array(self._losses) if self._losses else np.full((1, 3), np.nan)
        self._losses.clear()
        a, c, e = losses.mean(axis=0)
        return MetricsRow(self.step, s["mean"], s["std"], s["median"], s["q25"], s["q75"], float(a), float(c), float(e), time.perf_counter() - self._t0)

    # -- checkpoints -------------------------------------------------------

    def checkpoint_document(self) -> dict:
        return {
            "step": self.step,
            "seed": self.seed,
            "episode_index": self.episode_index,
            "rsi_resets": self.rsi_resets,
            "offline_done": self._offline_done,
            "rng_state": self.rng.bit_generator.state,
            "nets": self.nets.to_document(),
        }

    def restore(self, doc: dict) -> None:
        """Warm restart: networks, optimiser moments, counters and rng come back;
        online replay data and the in-flight episode do not."""
        if doc["seed"] != self.seed:
            raise TrainingError(f"checkpoint was written by seed {doc['seed']}, trainer uses seed {self.seed}")
        self.nets = AgentNets.from_document(self.specs, doc["nets"])
        self.step = int(doc["step"])
        self.episode_index = int(doc["episode_index"])
        self.rsi_resets = int(doc["rsi_resets"])
        self._offline_done = bool(doc["offline_done"])
        self.rng.bit_generator.state = doc["rng_state"]
        self.state = self.obs = None

    def run(self, budget_steps: int, on_eval: Callable[[Trainer, MetricsRow], None] | None = None) -> list[MetricsRow]:
        if budget_steps > 0 and not self._offline_done:
            self.offline_phase()
        while self.step < budget_steps:
            self.env_step()
            if self.step % self.eval_every == 0 or self.step == budget_steps:
                row = self._metrics_row()
                self.metrics.append(row)
                if on_eval is not None:
                    on_eval(self, row)
        return self.metrics


def train(
    env_config: EnvConfig,
    agent_config: AgentConfig,
    dataset: DemoDataset | None,
    budget_steps: int,
    seed: int,
    eval_every: int = 2000,
    eval_episodes: int = 20,
    initial_actor: nn.ParamSet | None = None,
) -> tuple[AgentNets, list[MetricsRow]]:
    trainer = Trainer(env_config, agent_config, dataset, seed, eval_every, eval_episodes, initial_actor)
    metrics = trainer.run(budget_steps)
    return trainer.nets, metrics
