"""Small dense/convolutional network engine with hand-written reverse mode.

Everything here works on float64 numpy arrays. Batched inputs have the batch
on the leading axis; images are NHWC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
LOG_STD_OFFSET = float(np.log(-LOG_STD_MIN / LOG_STD_MAX))
SQUASH_EPS = 1e-6
LEAKY_SLOPE = 0.01

HIDDEN_ACTIVATIONS = ("tanh", "leaky_relu")
OUTPUT_HEADS = ("linear", "gaussian_policy")


class DimensionError(ValueError):
    """Input shape does not match what a layer expects."""

    def __init__(self, layer: str, expected: Any, got: Any):
        super().__init__(f"{layer}: expected {expected}, got {got}")
        self.layer = layer
        self.expected = expected
        self.got = got


class StaleCacheError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient component in parameter {name!r}")
        self.name = name


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_head: str = "linear"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if min(self.layer_widths) < 1:
            raise ValueError(f"layer widths must be >= 1, got {self.layer_widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in OUTPUT_HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        if self.output_head == "gaussian_policy" and self.layer_widths[-1] % 2:
            raise ValueError("gaussian_policy head needs an even output width (mean, log_std)")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


@dataclass(frozen=True)
class ConvEncoderSpec:
    n_conv_layers: int = 2
    channels: int = 16
    kernel: int = 3
    stride: int = 2
    dense_widths: tuple[int, ...] = (128,)
    activation: str = "leaky_relu"
    in_channels: int = 3
    image_size: int = 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        if self.n_conv_layers < 1 or self.channels < 1 or self.kernel < 1 or self.stride < 1:
            raise ValueError("conv encoder sizes must be positive")
        if self.activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.conv_output_size() < 1:
            raise ValueError("image shrinks to nothing under this stride/kernel")

    def conv_output_size(self) -> int:
        size = self.image_size
        pad = (self.kernel - 1) // 2
        for _ in range(self.n_conv_layers):
            size = (size + 2 * pad - self.kernel) // self.stride + 1
        return size

    @property
    def flat_size(self) -> int:
        return self.conv_output_size() ** 2 * self.channels

    @property
    def feature_size(self) -> int:
        return self.dense_widths[-1] if self.dense_widths else self.flat_size


@dataclass
class ParamSet:
    entries: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self) -> None:
        for name, value in self.entries.items():
            self.adam_m.setdefault(name, np.zeros_like(value))
            self.adam_v.setdefault(name, np.zeros_like(value))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def names(self) -> list[str]:
        return sorted(self.entries)

    def copy(self) -> ParamSet:
        return ParamSet(
            {k: v.copy() for k, v in self.entries.items()},
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
            self.step_count,
        )

    def merged(self, other: ParamSet) -> ParamSet:
        """Union of two disjoint parameter sets (moments carried over)."""
        clash = set(self.entries) & set(other.entries)
        if clash:
            raise ValueError(f"parameter names collide: {sorted(clash)}")
        return ParamSet(
            {**self.entries, **other.entries},
            {**self.adam_m, **other.adam_m},
            {**self.adam_v, **other.adam_v},
            max(self.step_count, other.step_count),
        )

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.entries.items() if k.startswith(prefix)}

    def to_document(self) -> dict:
        def encode(arrays: dict[str, np.ndarray]) -> dict:
            return {
                name: {"shape": list(arr.shape), "values": [repr(float(x)) for x in arr.ravel()]}
                for name, arr in sorted(arrays.items())
            }

        return {
            "entries": encode(self.entries),
            "adam_m": encode(self.adam_m),
            "adam_v": encode(self.adam_v),
            "step_count": self.step_count,
        }

    @classmethod
    def from_document(cls, doc: dict) -> ParamSet:
        def decode(block: dict) -> dict[str, np.ndarray]:
            out = {}
            for name, item in block.items():
                shape = tuple(item["shape"])
                values = np.array([float(s) for s in item["values"]], dtype=np.float64)
                if values.size != math.prod(shape):
                    raise ValueError(f"parameter {name!r}: {values.size} values for shape {shape}")
                out[name] = values.reshape(shape)
            return out

        entries = decode(doc["entries"])
        m = decode(doc.get("adam_m", {}))
        v = decode(doc.get("adam_v", {}))
        return cls(entries, m, v, int(doc.get("step_count", 0)))


def params_equal(a: ParamSet, b: ParamSet) -> bool:
    if set(a.entries) != set(b.entries) or a.step_count != b.step_count:
        return False
    for group_a, group_b in ((a.entries, b.entries), (a.adam_m, b.adam_m), (a.adam_v, b.adam_v)):
        for k in group_a:
            if not np.array_equal(group_a[k], group_b[k]):
                return False
    return True


# ---------------------------------------------------------------------------
# initialisation


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str = "") -> ParamSet:
    entries = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        entries[f"{prefix}W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        entries[f"{prefix}b{i}"] = np.zeros(fan_out)
    return ParamSet(entries)


def init_conv_encoder(spec: ConvEncoderSpec, rng: np.random.Generator, prefix: str = "") -> ParamSet:
    entries = {}
    c_in = spec.in_channels
    for i in range(spec.n_conv_layers):
        fan_in = spec.kernel * spec.kernel * c_in
        bound = 1.0 / math.sqrt(fan_in)
        entries[f"{prefix}conv{i}.W"] = rng.uniform(-bound, bound, size=(spec.kernel, spec.kernel, c_in, spec.channels))
        entries[f"{prefix}conv{i}.b"] = np.zeros(spec.channels)
        c_in = spec.channels
    width = spec.flat_size
    for i, out in enumerate(spec.dense_widths):
        bound = 1.0 / math.sqrt(width)
        entries[f"{prefix}dense{i}.W"] = rng.uniform(-bound, bound, size=(width, out))
        entries[f"{prefix}dense{i}.b"] = np.zeros(out)
        width = out
    return ParamSet(entries)


# ---------------------------------------------------------------------------
# activations


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return upstream * (1.0 - a * a)
    return np.where(z > 0, upstream, LEAKY_SLOPE * upstream)


def clamp_log_std(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smoothly squash raw head outputs into (LOG_STD_MIN, LOG_STD_MAX); returns value and derivative.

    A sigmoid is used rather than a hard clip so the gradient never vanishes
    exactly at the bounds; the offset maps raw 0 to log_std 0 (unit std at init).
    """
    s = 1.0 / (1.0 + np.exp(-(raw + LOG_STD_OFFSET)))
    width = LOG_STD_MAX - LOG_STD_MIN
    return LOG_STD_MIN + width * s, width * s * (1.0 - s)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpCache:
    spec: MlpSpec
    prefix: str
    weights: list[np.ndarray]
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations
    post: list[np.ndarray]
    head_dscale: np.ndarray | None
    squeeze: bool
    used: bool = False


def mlp_forward(params: ParamSet, spec: MlpSpec, x: np.ndarray, prefix: str = "") -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != spec.layer_widths[0]:
        raise DimensionError(f"{prefix}layer0", spec.layer_widths[0], h.shape[-1])
    weights, inputs, pre, post = [], [], [], []
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        W = params.entries[f"{prefix}W{i}"]
        b = params.entries[f"{prefix}b{i}"]
        if W.shape[0] != h.shape[-1]:
            raise DimensionError(f"{prefix}layer{i}", W.shape[0], h.shape[-1])
        inputs.append(h)
        z = h @ W + b
        weights.append(W)
        pre.append(z)
        h = z if i == last else _act(spec.hidden_activation, z)
        post.append(h)
    head_dscale = None
    if spec.output_head == "gaussian_policy":
        d = h.shape[-1] // 2
        log_std, head_dscale = clamp_log_std(h[:, d:])
        h = np.concatenate([h[:, :d], log_std], axis=1)
    cache = MlpCache(spec, prefix, weights, inputs, pre, post, head_dscale, squeeze)
    return (h[0] if squeeze else h), cache


def mlp_backward(cache: MlpCache, upstream: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    if not isinstance(cache, MlpCache):
        raise StaleCacheError("mlp_backward needs the cache returned by mlp_forward")
    g = np.asarray(upstream, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    out_shape = cache.post[-1].shape
    if g.shape != out_shape:
        raise StaleCacheError(f"upstream gradient shape {g.shape} does not match forward output {out_shape}")
    spec, prefix = cache.spec, cache.prefix
    if cache.head_dscale is not None:
        d = g.shape[-1] // 2
        g = np.concatenate([g[:, :d], g[:, d:] * cache.head_dscale], axis=1)
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(spec.n_layers)):
        if i != spec.n_layers - 1:
            g = _act_grad(spec.hidden_activation, cache.pre[i], cache.post[i], g)
        grads[f"{prefix}W{i}"] = cache.inputs[i].T @ g
        grads[f"{prefix}b{i}"] = g.sum(axis=0)
        g = g @ cache.weights[i].T
    return grads, (g[0] if cache.squeeze else g)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int, out: int) -> np.ndarray:
    # xp: (B, Hp, Wp, C) already padded -> (B, out, out, k, k, C)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    windows = windows[:, : stride * (out - 1) + 1 : stride, : stride * (out - 1) + 1 : stride]
    return windows.transpose(0, 1, 2, 4, 5, 3)


@dataclass
class ConvCache:
    spec: ConvEncoderSpec
    prefix: str
    conv: list[tuple]  # (cols, W, z, a, in_shape)
    dense: list[tuple]  # (input, W, z, a)
    flat_shape: tuple
    squeeze: bool


def conv_encoder_forward(params: ParamSet, spec: ConvEncoderSpec, image: np.ndarray, prefix: str = "") -> tuple[np.ndarray, ConvCache]:
    x = np.asarray(image, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    expected = (spec.image_size, spec.image_size, spec.in_channels)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise DimensionError(f"{prefix}conv0", expected, x.shape[1:] if x.ndim == 4 else x.shape)
    k, s = spec.kernel, spec.stride
    pad = (k - 1) // 2
    B = x.shape[0]
    conv_records = []
    h = x
    for i in range(spec.n_conv_layers):
        W = params.entries[f"{prefix}conv{i}.W"]
        b = params.entries[f"{prefix}conv{i}.b"]
        size = h.shape[1]
        out = (size + 2 * pad - k) // s + 1
        hp = np.pad(h, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else h
        cols = _im2col(hp, k, s, out).reshape(B * out * out, k * k * h.shape[3])
        z = cols @ W.reshape(-1, W.shape[3]) + b
        a = _act(spec.activation, z)
        conv_records.append((cols, W, z, a, h.shape, out))
        h = a.reshape(B, out, out, W.shape[3])
    flat_shape = h.shape
    h = h.reshape(B, -1)
    dense_records = []
    for i in range(len(spec.dense_widths)):
        W = params.entries[f"{prefix}dense{i}.W"]
        b = params.entries[f"{prefix}dense{i}.b"]
        z = h @ W + b
        a = _act(spec.activation, z)
        dense_records.append((h, W, z, a))
        h = a
    cache = ConvCache(spec, prefix, conv_records, dense_records, flat_shape, squeeze)
    return (h[0] if squeeze else h), cache


def conv_encoder_backward(cache: ConvCache, upstream: np.ndarray) -> dict[str, np.ndarray]:
    if not isinstance(cache, ConvCache):
        raise StaleCacheError("conv_encoder_backward needs the cache returned by conv_encoder_forward")
    g = np.asarray(upstream, dtype=np.float64)
    if cache.squeeze:
        g = g[None]
    spec, prefix = cache.spec, cache.prefix
    out_shape = cache.dense[-1][3].shape if cache.dense else (cache.flat_shape[0], math.prod(cache.flat_shape[1:]))
    if g.shape != out_shape:
        raise StaleCacheError(f"upstream gradient shape {g.shape} does not match encoder output {out_shape}")
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(len(cache.dense))):
        inp, W, z, a = cache.dense[i]
        g = _act_grad(spec.activation, z, a, g)
        grads[f"{prefix}dense{i}.W"] = inp.T @ g
        grads[f"{prefix}dense{i}.b"] = g.sum(axis=0)
        g = g @ W.T
    k, s = spec.kernel, spec.stride
    pad = (k - 1) // 2
    g = g.reshape(cache.flat_shape)
    for i in reversed(range(len(cache.conv))):
        cols, W, z, a, in_shape, out = cache.conv[i]
        gz = _act_grad(spec.activation, z, a, g.reshape(z.shape))
        grads[f"{prefix}conv{i}.W"] = (cols.T @ gz).reshape(W.shape)
        grads[f"{prefix}conv{i}.b"] = gz.sum(axis=0)
        if i == 0:
            break
        B, H, Wd, C = in_shape
        dcols = (gz @ W.reshape(-1, W.shape[3]).T).reshape(B, out, out, k, k, C)
        dxp = np.zeros((B, H + 2 * pad, Wd + 2 * pad, C))
        span = s * (out - 1) + 1
        for di in range(k):
            for dj in range(k):
                dxp[:, di : di + span : s, dj : dj + span : s, :] += dcols[:, :, :, di, dj, :]
        g = dxp[:, pad : pad + H, pad : pad + Wd, :]
    return grads


# ---------------------------------------------------------------------------
# optimiser


def adam_step(
    params: ParamSet,
    grads: dict[str, np.ndarray],
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    for name, g in grads.items():
        if name not in params.entries:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params.entries[name].shape:
            raise DimensionError(name, params.entries[name].shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    t = params.step_count + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    entries, ms, vs = {}, {}, {}
    for name, p in params.entries.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * params.adam_m[name] + (1.0 - beta1) * g
        v = beta2 * params.adam_v[name] + (1.0 - beta2) * g * g
        entries[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        ms[name] = m
        vs[name] = v
    return ParamSet(entries, ms, vs, t)


def soft_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    entries = {}
    for name, t in target.entries.items():
        entries[name] = (1.0 - tau) * t + tau * online.entries[name]
    return ParamSet(entries, target.adam_m, target.adam_v, target.step_count)


# ---------------------------------------------------------------------------
# squashed Gaussian policy head

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GaussianPolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    pre_squash: np.ndarray
    sampled_action: np.ndarray
    log_prob: np.ndarray
    noise: np.ndarray


def split_policy_output(out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = out.shape[-1] // 2
    return out[..., :d], out[..., d:]


def gaussian_policy_sample(mean: np.ndarray, log_std: np.ndarray, noise: np.ndarray) -> GaussianPolicyOutput:
    """Reparameterised tanh-squashed Gaussian sample; log_prob sums over the last axis."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.clip(np.asarray(log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)
    noise = np.asarray(noise, dtype=np.float64)
    u = mean + np.exp(log_std) * noise
    action = np.tanh(u)
    log_prob = np.sum(-0.5 * noise**2 - log_std - _HALF_LOG_2PI - np.log(1.0 - action**2 + SQUASH_EPS), axis=-1)
    return GaussianPolicyOutput(mean, log_std, u, action, log_prob, noise)


def sample_backward(out: GaussianPolicyOutput, dlog_prob: np.ndarray, daction: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. (mean, log_std) of upstream signals on log_prob and the squashed action.

    Noise is held fixed (reparameterisation).
    """
    a = out.sampled_action
    one_m = 1.0 - a * a
    dlp = np.asarray(dlog_prob, dtype=np.float64)[..., None]
    # d log_prob / d u, through the squash correction only
    dlogp_du = 2.0 * a * one_m / (one_m + SQUASH_EPS)
    du = dlp * dlogp_du
    if daction is not None:
        du = du + daction * one_m
    sigma_noise = np.exp(out.log_std) * out.noise
    dmean = du
    dlog_std = du * sigma_noise - dlp
    return dmean, dlog_std


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """log pi(action) for given squashed actions plus its gradients w.r.t. mean and log_std."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS)
    u = np.arctanh(a)
    inv_std = np.exp(-log_std)
    z = (u - mean) * inv_std
    log_prob = np.sum(-0.5 * z**2 - log_std - _HALF_LOG_2PI - np.log(1.0 - a**2 + SQUASH_EPS), axis=-1)
    return log_prob, z * inv_std, z**2 - 1.0


def gaussian_entropy(log_std: np.ndarray) -> np.ndarray:
    """Entropy of the pre-squash Gaussian."""
    return np.sum(log_std + 0.5 + _HALF_LOG_2PI, axis=-1)
