"""Binary demonstration container.

Layout (all integers little-endian)::

    b"DMFDDS01"
    u32 format_version
    u32 meta_length, meta_length bytes of UTF-8 JSON
    u32 n_episodes
    per episode:
        u64 payload_length (bytes)
        payload: float64 LE values
            [horizon, state_len, action_dim, p_hat_final,
             states (horizon+1) x state_len, actions horizon x action_dim, rewards horizon]
        u32 crc32(payload)

Observations are not stored; they are re-rendered from the saved states on load,
which is exact because rendering is a deterministic function of the state.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .env import DeformableEnv, EnvConfig, state_from_vector, state_to_vector, state_vector_length
from .expert import DemoDataset, Demonstration

MAGIC = b"DMFDDS01"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    def __init__(self, found: int, supported: int):
        super().__init__(f"dataset format version {found} is not supported (this reader handles version {supported})")
        self.found = found
        self.supported = supported


def config_from_meta(meta: dict) -> EnvConfig:
    cfg = dict(meta["config"])
    cfg["grid"] = tuple(cfg["grid"])
    return EnvConfig(**cfg)


def _episode_payload(ep: Demonstration) -> bytes:
    states = np.stack([state_to_vector(s) for s in ep.env_states])
    actions = np.stack(ep.actions) if ep.actions else np.zeros((0, 0))
    header = np.array([ep.horizon, states.shape[1], actions.shape[1] if ep.horizon else 0, ep.p_hat_final])
    flat = np.concatenate([header, states.ravel(), actions.ravel(), np.asarray(ep.rewards, dtype=np.float64)])
    return flat.astype("<f8").tobytes()


def save_dataset(ds: DemoDataset, path) -> int:
    """Write ``ds`` to ``path``; returns the file size in bytes."""
    meta = json.dumps(ds.meta, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", ds.n_episodes)]
    for ep in ds.episodes:
        payload = _episode_payload(ep)
        chunks += [struct.pack("<Q", len(payload)), payload, struct.pack("<I", zlib.crc32(payload))]
    blob = b"".join(chunks)
    Path(path).write_bytes(blob)
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(f"file ends inside {what} (offset {self.pos}, need {n} bytes)")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def load_dataset(path) -> DemoDataset:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise DatasetFormatError("not a demonstration dataset (bad magic bytes)")
    version, meta_len = struct.unpack("<II", r.take(8, "header"))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version, FORMAT_VERSION)
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"metadata block is not valid JSON: {exc}") from exc
    (n_episodes,) = struct.unpack("<I", r.take(4, "episode count"))
    env = DeformableEnv(config_from_meta(meta))
    slen = state_vector_length(env.config)
    episodes = []
    for k in range(n_episodes):
        (length,) = struct.unpack("<Q", r.take(8, f"episode {k} length"))
        payload = r.take(length, f"episode {k}")
        (crc,) = struct.unpack("<I", r.take(4, f"episode {k} checksum"))
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"episode {k}: checksum mismatch")
        episodes.append(_decode_episode(env, payload, slen, k))
    if r.pos != len(r.blob):
        raise DatasetFormatError(f"{len(r.blob) - r.pos} trailing bytes after the last episode")
    if meta.get("n_episodes") != n_episodes:
        raise DatasetFormatError(f"metadata says {meta.get('n_episodes')} episodes, file holds {n_episodes}")
    return DemoDataset(meta, episodes)


def _decode_episode(env: DeformableEnv, payload: bytes, slen: int, k: int) -> Demonstration:
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    horizon, state_len, action_dim = (int(v) for v in flat[:3])
    p_hat = float(flat[3])
    if state_len != slen:
        raise DatasetFormatError(f"episode {k}: state length {state_len} does not match config ({slen})")
    need = 4 + (horizon + 1) * state_len + horizon * action_dim + horizon
    if flat.size != need:
        raise DatasetFormatError(f"episode {k}: payload holds {flat.size} values, layout needs {need}")
    off = 4
    states_flat = flat[off : off + (horizon + 1) * state_len].reshape(horizon + 1, state_len)
    off += (horizon + 1) * state_len
    actions = flat[off : off + horizon * action_dim].reshape(horizon, action_dim)
    off += horizon * action_dim
    rewards = flat[off:]
    states = [state_from_vector(env, v) for v in states_flat]
    observations = [env.observe(s) for s in states]
    return Demonstration(states, observations, [a.copy() for a in actions], [float(x) for x in rewards], p_hat)


def datasets_equal(a: DemoDataset, b: DemoDataset) -> bool:
    from .env import states_equal

    if a.meta != b.meta or a.n_episodes != b.n_episodes:
        return False
    for ea, eb in zip(a.episodes, b.episodes):
        if ea.p_hat_final != eb.p_hat_final or ea.rewards != eb.rewards:
            return False
        if len(ea.actions) != len(eb.actions) or not all(np.array_equal(x, y) for x, y in zip(ea.actions, eb.actions)):
            return False
        if len(ea.env_states) != len(eb.env_states) or not all(states_equal(x, y) for x, y in zip(ea.env_states, eb.env_states)):
            return False
        for oa, ob in zip(ea.observations, eb.observations):
            if not np.array_equal(oa.state_vector, ob.state_vector):
                return False
            if (oa.image is None) != (ob.image is None) or (oa.image is not None and not np.array_equal(oa.image, ob.image)):
                return False
    return True


def replay_check(ds: DemoDataset) -> list[int]:
    """Indices of episodes whose stored states are not reproduced by re-simulating their actions."""
    from .env import states_equal

    env = DeformableEnv(config_from_meta(ds.meta))
    bad = []
    for k, ep in enumerate(ds.episodes):
        state, _ = env.reset_to(ep.env_states[0])
        ok = True
        for t, action in enumerate(ep.actions):
            state, _, _, _ = env.step(state, action)
            if not states_equal(state, ep.env_states[t + 1]):
                ok = False
                break
        if not ok:
            bad.append(k)
    return bad
