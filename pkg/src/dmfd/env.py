"""Planar mass-spring rope and cloth tasks driven by point pickers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

TASKS = ("straighten_rope", "cloth_fold", "cloth_fold_diag_pinned", "cloth_fold_diag_unpinned")
OBS_MODES = ("state", "image", "both")

IMAGE_SIZE = 32
BACKGROUND_COLOR = (196, 164, 120)
OBJECT_COLOR = (40, 90, 200)
PICKER_COLOR = (250, 250, 250)
PICKER_GRASP_COLOR = (250, 40, 40)

# ParticleSystem position/velocity ordering of cloth corners in reduced_state
CORNER_NAMES = ("top_left", "top_right", "bottom_left", "bottom_right")


class SimulationError(FloatingPointError):
    """The integrator produced non-finite values."""


class MalformedStateError(ValueError):
    pass


class DegenerateEpisodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    task: str = "straighten_rope"
    horizon: int = 30
    n_particles: int = 10
    grid: tuple[int, int] = (5, 5)
    dt: float = 0.005
    substeps_per_action: int = 40
    damping: float = 0.5
    stiffness: float = 800.0
    shear_stiffness_ratio: float = 0.5
    compression_ratio: float | None = None
    mass: float = 0.05
    max_picker_step: float = 0.05
    grasp_radius: float = 0.03
    rope_segment: float = 0.04
    rope_target_length: float = 0.3
    cloth_size: float = 0.25
    p_opt: float = 0.0
    n_variants: int = 20
    stiffness_jitter: float = 0.3
    scale_jitter: float = 0.1
    camera_half_extent: float = 0.35
    obs_mode: str = "state"

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.obs_mode not in OBS_MODES:
            raise ValueError(f"unknown obs_mode {self.obs_mode!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0 or self.substeps_per_action < 1:
            raise ValueError("dt must be positive and substeps_per_action >= 1")
        if self.n_particles < 2 or min(self.grid) < 2:
            raise ValueError("need at least two particles per object dimension")
        if self.n_variants < 1:
            raise ValueError("n_variants must be >= 1")
        if self.compression_ratio is None:
            # cloth buckles out of the plane instead of resisting in-plane compression
            object.__setattr__(self, "compression_ratio", 1.0 if self.is_rope else 0.0)
        if not 0.0 <= self.compression_ratio <= 1.0:
            raise ValueError("compression_ratio must lie in [0, 1]")

    @property
    def is_rope(self) -> bool:
        return self.task == "straighten_rope"

    @property
    def n_pickers(self) -> int:
        return 2 if self.task == "cloth_fold" else 1

    @property
    def action_dim(self) -> int:
        return 3 * self.n_pickers

    @property
    def n_object_particles(self) -> int:
        return self.n_particles if self.is_rope else self.grid[0] * self.grid[1]

    @property
    def reduced_state_dim(self) -> int:
        return 20 if self.is_rope else 8

    @property
    def state_obs_dim(self) -> int:
        return self.reduced_state_dim + 3 * self.n_pickers

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["grid"] = list(self.grid)
        return out


@dataclass
class ParticleSystem:
    positions: np.ndarray
    velocities: np.ndarray
    springs: np.ndarray  # (S, 2) int
    rest_lengths: np.ndarray
    stiffness: np.ndarray
    pinned: np.ndarray
    mass: np.ndarray
    compression_ratio: float = 1.0
    incidence: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = len(self.positions)
        inc = np.zeros((n, len(self.springs)))
        if len(self.springs):
            if self.springs.min() < 0 or self.springs.max() >= n:
                raise MalformedStateError("spring endpoint out of range")
            if np.any(self.rest_lengths <= 0):
                raise MalformedStateError("spring rest lengths must be positive")
            cols = np.arange(len(self.springs))
            inc[self.springs[:, 0], cols] += 1.0
            inc[self.springs[:, 1], cols] -= 1.0
        self.incidence = inc

    def with_motion(self, positions: np.ndarray, velocities: np.ndarray) -> ParticleSystem:
        out = object.__new__(ParticleSystem)
        out.__dict__.update(self.__dict__)
        out.positions = positions
        out.velocities = velocities
        return out

    def kinetic_energy(self) -> float:
        return float(0.5 * np.sum(self.mass[:, None] * self.velocities**2))

    def potential_energy(self) -> float:
        d = self.positions[self.springs[:, 1]] - self.positions[self.springs[:, 0]]
        ext = np.linalg.norm(d, axis=1) - self.rest_lengths
        k = np.where(ext < 0, self.stiffness * self.compression_ratio, self.stiffness)
        return float(0.5 * np.sum(k * ext**2))


@dataclass
class Picker:
    position: np.ndarray
    grasped_particle: int | None = None
    grasp_radius: float = 0.03


@dataclass
class EnvState:
    particles: ParticleSystem
    pickers: list[Picker]
    step_index: int
    variant_id: int


@dataclass
class Observation:
    mode: str
    reduced_state: np.ndarray
    picker_state: np.ndarray
    image: np.ndarray | None = None

    @property
    def state_vector(self) -> np.ndarray:
        return np.concatenate([self.reduced_state, self.picker_state])


@dataclass(frozen=True)
class EvalRecord:
    p_start: float
    p_end: float
    p_hat: float


# ---------------------------------------------------------------------------
# physics


def spring_forces(particles: ParticleSystem) -> np.ndarray:
    x = particles.positions
    s = particles.springs
    d = x[s[:, 1]] - x[s[:, 0]]
    length = np.maximum(np.sqrt(np.sum(d * d, axis=1)), 1e-12)
    ext = length - particles.rest_lengths
    k = particles.stiffness
    if particles.compression_ratio != 1.0:
        k = np.where(ext < 0, k * particles.compression_ratio, k)
    # force on endpoint 0 along d/|d|; endpoint 1 gets the opposite
    f = (k * ext / length)[:, None] * d
    return particles.incidence @ f


def physics_substep(
    particles: ParticleSystem,
    dt: float,
    damping: float,
    kinematic: np.ndarray | None = None,
) -> ParticleSystem:
    """Semi-implicit Euler step. Pinned and kinematic particles do not integrate."""
    with np.errstate(over="ignore", invalid="ignore"):
        force = spring_forces(particles) - damping * particles.velocities
        v = particles.velocities + force / particles.mass[:, None] * dt
        frozen = particles.pinned if kinematic is None else (particles.pinned | kinematic)
        v[frozen] = 0.0
        x = particles.positions + v * dt
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise SimulationError("mass-spring integration diverged")
    return particles.with_motion(x, v)


def normalized_performance(p_t: float, p_0: float, p_opt: float) -> float:
    if p_opt == p_0:
        raise DegenerateEpisodeError("p_opt equals the starting performance; normalized performance is undefined")
    return (p_t - p_0) / (p_opt - p_0)


# ---------------------------------------------------------------------------
# environment


def _variant_params(config: EnvConfig, variant_id: int) -> tuple[float, float]:
    rng = np.random.default_rng([variant_id, 0x5EED])
    stiffness_scale = 1.0 + config.stiffness_jitter * rng.uniform(-1.0, 1.0)
    size_scale = 1.0 + config.scale_jitter * rng.uniform(-1.0, 1.0)
    return stiffness_scale, size_scale


class DeformableEnv:
    """Functional environment: states are values, ``step`` never mutates its input."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self._topology_cache: dict[int, tuple] = {}

    # -- construction -----------------------------------------------------

    def _topology(self, variant_id: int):
        if variant_id in self._topology_cache:
            return self._topology_cache[variant_id]
        cfg = self.config
        k_scale, size_scale = _variant_params(cfg, variant_id)
        k = cfg.stiffness * k_scale
        if cfg.is_rope:
            n = cfg.n_particles
            springs = np.array([(i, i + 1) for i in range(n - 1)], dtype=np.int64)
            rest = np.full(n - 1, cfg.rope_segment * size_scale)
            stiff = np.full(n - 1, k)
            pinned = np.zeros(n, dtype=bool)
        else:
            nx, ny = cfg.grid
            spacing = cfg.cloth_size * size_scale / (nx - 1)
            spacing_y = cfg.cloth_size * size_scale / (ny - 1)
            springs, rest, stiff = [], [], []
            idx = lambda r, c: r * nx + c  # noqa: E731  row 0 is the top edge
            for r in range(ny):
                for c in range(nx):
                    if c + 1 < nx:
                        springs.append((idx(r, c), idx(r, c + 1)))
                        rest.append(spacing)
                        stiff.append(k)
                    if r + 1 < ny:
                        springs.append((idx(r, c), idx(r + 1, c)))
                        rest.append(spacing_y)
                        stiff.append(k)
                    if c + 1 < nx and r + 1 < ny:
                        diag = math.hypot(spacing, spacing_y)
                        springs.append((idx(r, c), idx(r + 1, c + 1)))
                        springs.append((idx(r, c + 1), idx(r + 1, c)))
                        rest += [diag, diag]
                        stiff += [k * cfg.shear_stiffness_ratio] * 2
            springs = np.array(springs, dtype=np.int64)
            rest = np.array(rest)
            stiff = np.array(stiff)
            pinned = np.zeros(nx * ny, dtype=bool)
            if cfg.task == "cloth_fold_diag_pinned":
                pinned[self.corner_indices()[0]] = True
        mass = np.full(len(pinned), cfg.mass)
        topo = (springs, rest, stiff, pinned, mass, size_scale)
        self._topology_cache[variant_id] = topo
        return topo

    def _build(self, positions: np.ndarray, velocities: np.ndarray, variant_id: int) -> ParticleSystem:
        springs, rest, stiff, pinned, mass, _ = self._topology(variant_id)
        return ParticleSystem(positions, velocities, springs, rest, stiff, pinned, mass, self.config.compression_ratio)

    def corner_indices(self) -> tuple[int, int, int, int]:
        """Particle indices of (top_left, top_right, bottom_left, bottom_right)."""
        nx, ny = self.config.grid
        return (0, nx - 1, (ny - 1) * nx, ny * nx - 1)

    def _initial_positions(self, rng: np.random.Generator, size_scale: float) -> np.ndarray:
        cfg = self.config
        if cfg.is_rope:
            seg = cfg.rope_segment * size_scale
            # crumpled random walk; keep the endpoints well short of the target length
            for _ in range(1000):
                heading = rng.uniform(0.0, 2.0 * math.pi)
                pts = [np.zeros(2)]
                for _ in range(cfg.n_particles - 1):
                    heading += rng.uniform(-1.3, 1.3)
                    pts.append(pts[-1] + seg * np.array([math.cos(heading), math.sin(heading)]))
                pts = np.array(pts)
                if np.linalg.norm(pts[-1] - pts[0]) <= 0.6 * cfg.rope_target_length:
                    break
            pts -= pts.mean(axis=0)
            return pts + rng.uniform(-0.03, 0.03, size=2)
        nx, ny = cfg.grid
        w = cfg.cloth_size * size_scale
        xs = np.linspace(-w / 2, w / 2, nx)
        ys = np.linspace(w / 2, -w / 2, ny)
        grid = np.array([(x, y) for y in ys for x in xs])
        return grid + rng.uniform(-0.03, 0.03, size=2)

    def _initial_pickers(self, positions: np.ndarray) -> list[Picker]:
        cfg = self.config
        if cfg.is_rope:
            starts = [0]
        elif cfg.task == "cloth_fold":
            tl, _, bl, _ = self.corner_indices()
            starts = [tl, bl]
        else:
            starts = [self.corner_indices()[2]]
        return [Picker(positions[i].copy(), None, cfg.grasp_radius) for i in starts]

    def reset(self, seed: int) -> tuple[EnvState, Observation]:
        cfg = self.config
        for attempt in range(100):
            rng = np.random.default_rng([seed, attempt])
            variant_id = int(rng.integers(cfg.n_variants))
            size_scale = self._topology(variant_id)[5]
            pos = self._initial_positions(rng, size_scale)
            particles = self._build(pos, np.zeros_like(pos), variant_id)
            state = EnvState(particles, self._initial_pickers(pos), 0, variant_id)
            if self.performance(state) != cfg.p_opt:
                return state, self.observe(state)
        raise DegenerateEpisodeError(f"seed {seed}: 100 consecutive resets started at p_opt")

    def reset_to(self, state: EnvState) -> tuple[EnvState, Observation]:
        self.validate(state)
        restored = copy_state(state)
        return restored, self.observe(restored)

    def validate(self, state: EnvState) -> None:
        cfg = self.config
        n = cfg.n_object_particles
        p = state.particles
        if not isinstance(state, EnvState):
            raise MalformedStateError(f"expected EnvState, got {type(state).__name__}")
        if p.positions.shape != (n, 2) or p.velocities.shape != (n, 2):
            raise MalformedStateError(f"particle arrays must have shape ({n}, 2)")
        if not (np.all(np.isfinite(p.positions)) and np.all(np.isfinite(p.velocities))):
            raise MalformedStateError("non-finite particle state")
        if not 0 <= state.step_index <= cfg.horizon:
            raise MalformedStateError(f"step_index {state.step_index} outside [0, {cfg.horizon}]")
        if not 0 <= state.variant_id < cfg.n_variants:
            raise MalformedStateError(f"variant_id {state.variant_id} outside [0, {cfg.n_variants})")
        if len(state.pickers) != cfg.n_pickers:
            raise MalformedStateError(f"expected {cfg.n_pickers} pickers, got {len(state.pickers)}")
        for pk in state.pickers:
            if pk.grasped_particle is not None and not 0 <= pk.grasped_particle < n:
                raise MalformedStateError(f"grasped particle {pk.grasped_particle} out of range")

    # -- dynamics ---------------------------------------------------------

    def step(self, state: EnvState, action) -> tuple[EnvState, float, bool, Observation]:
        cfg = self.config
        action = np.asarray(action, dtype=np.float64).ravel()
        if action.shape != (cfg.action_dim,):
            raise ValueError(f"action must have length {cfg.action_dim}, got {action.shape[0]}")
        if state.step_index >= cfg.horizon:
            raise RuntimeError("episode already finished; reset before stepping")
        action = np.clip(action, -1.0, 1.0)
        particles = state.particles
        x = particles.positions
        bound = cfg.camera_half_extent
        pickers, starts, ends = [], [], []
        for i, pk in enumerate(state.pickers):
            dx, dy, grasp = action[3 * i : 3 * i + 3]
            grasped = pk.grasped_particle
            if grasp > 0:
                if grasped is None:
                    dist = np.linalg.norm(x - pk.position, axis=1)
                    dist[particles.pinned] = np.inf
                    nearest = int(np.argmin(dist))
                    if dist[nearest] <= pk.grasp_radius:
                        grasped = nearest
            else:
                grasped = None
            target = np.clip(pk.position + cfg.max_picker_step * np.array([dx, dy]), -bound, bound)
            pickers.append(Picker(target, grasped, pk.grasp_radius))
            starts.append(pk.position)
            ends.append(target)

        held = [(pk.grasped_particle, s, e) for pk, s, e in zip(pickers, starts, ends) if pk.grasped_particle is not None]
        kinematic = None
        if held:
            kinematic = np.zeros(len(x), dtype=bool)
            for idx, _, _ in held:
                kinematic[idx] = True
        pos = x.copy()
        vel = particles.velocities.copy()
        for idx, s, _ in held:
            pos[idx] = s
            vel[idx] = 0.0
        current = particles.with_motion(pos, vel)
        n_sub = cfg.substeps_per_action
        for k in range(1, n_sub + 1):
            current = physics_substep(current, cfg.dt, cfg.damping, kinematic)
            if held:
                frac = k / n_sub
                for idx, s, e in held:
                    current.positions[idx] = e if k == n_sub else s + frac * (e - s)
        new_state = EnvState(current, pickers, state.step_index + 1, state.variant_id)
        reward = self.performance(new_state)
        done = new_state.step_index == cfg.horizon
        return new_state, reward, done, self.observe(new_state)

    # -- observations -----------------------------------------------------

    def reduced_state(self, state: EnvState) -> np.ndarray:
        """Rope: 10 keypoints (x, y) spread evenly by index; cloth: corners in CORNER_NAMES order."""
        x = state.particles.positions
        if self.config.is_rope:
            n = len(x)
            idx = np.round(np.linspace(0, n - 1, 10)).astype(int)
            return x[idx].ravel().copy()
        return x[list(self.corner_indices())].ravel().copy()

    def picker_state(self, state: EnvState) -> np.ndarray:
        return np.concatenate([np.append(pk.position, 1.0 if pk.grasped_particle is not None else 0.0) for pk in state.pickers])

    def observe(self, state: EnvState, mode: str | None = None) -> Observation:
        mode = mode or self.config.obs_mode
        image = self.render_image(state) if mode in ("image", "both") else None
        return Observation(mode, self.reduced_state(state), self.picker_state(state), image)

    def performance(self, state: EnvState) -> float:
        x = state.particles.positions
        cfg = self.config
        if cfg.is_rope:
            return -abs(float(np.linalg.norm(x[0] - x[-1])) - cfg.rope_target_length)
        tl, tr, bl, br = (x[i] for i in self.corner_indices())
        if cfg.task == "cloth_fold":
            return -0.5 * (float(np.linalg.norm(tl - tr)) + float(np.linalg.norm(bl - br)))
        # bottom-left folds onto top-right across the anti-diagonal; symmetric in the pair
        return -float(np.linalg.norm(bl - tr))

    # -- rendering --------------------------------------------------------

    def _pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        e = self.config.camera_half_extent
        c = -e + (np.arange(IMAGE_SIZE) + 0.5) * (2 * e / IMAGE_SIZE)
        return c, c[::-1]

    def world_to_pixel(self, point) -> tuple[int, int]:
        e = self.config.camera_half_extent
        scale = IMAGE_SIZE / (2 * e)
        col = int(np.clip(math.floor((point[0] + e) * scale), 0, IMAGE_SIZE - 1))
        row = int(np.clip(math.floor((e - point[1]) * scale), 0, IMAGE_SIZE - 1))
        return row, col

    def render_image(self, state: EnvState) -> np.ndarray:
        xs, ys = self._pixel_centers()
        px, py = np.meshgrid(xs, ys)
        pts = np.stack([px.ravel(), py.ravel()], axis=1)
        img = np.empty((IMAGE_SIZE * IMAGE_SIZE, 3), dtype=np.uint8)
        img[:] = BACKGROUND_COLOR
        x = state.particles.positions
        if self.config.is_rope:
            mask = _segments_mask(pts, x[:-1], x[1:], 0.6 * (2 * self.config.camera_half_extent / IMAGE_SIZE))
        else:
            nx, ny = self.config.grid
            tris = []
            for r in range(ny - 1):
                for c in range(nx - 1):
                    a, b, d, e = r * nx + c, r * nx + c + 1, (r + 1) * nx + c, (r + 1) * nx + c + 1
                    tris += [(a, b, e), (a, e, d)]
            tris = np.array(tris)
            mask = _triangles_mask(pts, x[tris[:, 0]], x[tris[:, 1]], x[tris[:, 2]])
        img[mask] = OBJECT_COLOR
        img = img.reshape(IMAGE_SIZE, IMAGE_SIZE, 3)
        for pk in state.pickers:
            row, col = self.world_to_pixel(pk.position)
            color = PICKER_GRASP_COLOR if pk.grasped_particle is not None else PICKER_COLOR
            img[max(row - 1, 0) : row + 2, max(col - 1, 0) : col + 2] = color
        return img


def _segments_mask(pts: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    ab = b - a
    ap = pts[:, None, :] - a[None]
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-18)
    t = np.clip(np.sum(ap * ab[None], axis=2) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    dist2 = np.sum((pts[:, None, :] - closest) ** 2, axis=2)
    return np.any(dist2 <= radius * radius, axis=1)


def _triangles_mask(pts: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    def edge(p0, p1, q):
        return (p1[None, :, 0] - p0[None, :, 0]) * (q[:, None, 1] - p0[None, :, 1]) - (p1[None, :, 1] - p0[None, :, 1]) * (q[:, None, 0] - p0[None, :, 0])

    e0, e1, e2 = edge(a, b, pts), edge(b, c, pts), edge(c, a, pts)
    inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    return np.any(inside, axis=1)


# ---------------------------------------------------------------------------
# state copies and flat serialisation


def copy_state(state: EnvState) -> EnvState:
    p = state.particles.with_motion(state.particles.positions.copy(), state.particles.velocities.copy())
    pickers = [Picker(pk.position.copy(), pk.grasped_particle, pk.grasp_radius) for pk in state.pickers]
    return EnvState(p, pickers, state.step_index, state.variant_id)


def states_equal(a: EnvState, b: EnvState) -> bool:
    if a.step_index != b.step_index or a.variant_id != b.variant_id or len(a.pickers) != len(b.pickers):
        return False
    if not (np.array_equal(a.particles.positions, b.particles.positions) and np.array_equal(a.particles.velocities, b.particles.velocities)):
        return False
    return all(
        np.array_equal(p.position, q.position) and p.grasped_particle == q.grasped_particle for p, q in zip(a.pickers, b.pickers)
    )


def state_vector_length(config: EnvConfig) -> int:
    return 2 + 4 * config.n_object_particles + 3 * config.n_pickers


def state_to_vector(state: EnvState) -> np.ndarray:
    """[step_index, variant_id, positions, velocities, (picker x, y, grasped or -1)...]"""
    parts = [np.array([state.step_index, state.variant_id], dtype=np.float64), state.particles.positions.ravel(), state.particles.velocities.ravel()]
    for pk in state.pickers:
        parts.append(np.array([pk.position[0], pk.position[1], -1.0 if pk.grasped_particle is None else pk.grasped_particle]))
    return np.concatenate(parts)


def state_from_vector(env: DeformableEnv, vec: np.ndarray) -> EnvState:
    cfg = env.config
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (state_vector_length(cfg),):
        raise MalformedStateError(f"state vector length {vec.shape} != {state_vector_length(cfg)}")
    n = cfg.n_object_particles
    step_index, variant_id = int(vec[0]), int(vec[1])
    if not 0 <= variant_id < cfg.n_variants:
        raise MalformedStateError(f"variant_id {variant_id} outside [0, {cfg.n_variants})")
    pos = vec[2 : 2 + 2 * n].reshape(n, 2).copy()
    vel = vec[2 + 2 * n : 2 + 4 * n].reshape(n, 2).copy()
    pickers = []
    off = 2 + 4 * n
    for i in range(cfg.n_pickers):
        px, py, g = vec[off + 3 * i : off + 3 * i + 3]
        pickers.append(Picker(np.array([px, py]), None if g < 0 else int(g), cfg.grasp_radius))
    state = EnvState(env._build(pos, vel, variant_id), pickers, step_index, variant_id)
    env.validate(state)
    return state


def with_config(config: EnvConfig, **changes) -> EnvConfig:
    return replace(config, **changes)
