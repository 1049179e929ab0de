"""Trajectory ingestion, scene construction, augmentation, synthetic data,
and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


class DataError(Exception):
    """Malformed input data or an impossible scene request."""


# ---------------------------------------------------------------------------
# raw trajectory records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryRecord:
    frame: int
    agent: int
    x: float
    y: float


def load_trajectory_file(path: str) -> list[TrajectoryRecord]:
    """Parse a whitespace-separated trajectory file.

    Each nonempty line is ``frame_id agent_id x y``. Records are returned
    sorted by (frame, agent); malformed lines raise :class:`DataError`
    with the 1-based line number.
    """
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                frame = int(float(parts[0]))
                agent = int(float(parts[1]))
                x = float(parts[2])
                y = float(parts[3])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: unparseable line {line.strip()!r}") from exc
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"{path}:{lineno}: non-finite coordinates")
            records.append(TrajectoryRecord(frame, agent, x, y))
    records.sort(key=lambda r: (r.frame, r.agent))
    return records


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

def compute_velocities(positions: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Per-step velocity by backward difference over observed steps.

    The first observed step copies the following step's velocity; an agent
    observed once gets zero velocity. Gaps divide by the gap length.
    """
    n, steps, _ = positions.shape
    vel = np.zeros_like(positions)
    for i in range(n):
        obs = np.flatnonzero(present[i])
        if len(obs) < 2:
            continue
        for j in range(1, len(obs)):
            t_prev, t_cur = obs[j - 1], obs[j]
            vel[i, t_cur] = (positions[i, t_cur] - positions[i, t_prev]) / (t_cur - t_prev)
        vel[i, obs[0]] = vel[i, obs[1]]
    return vel


@dataclass
class Scene:
    """One prediction instance.

    Past arrays cover timesteps -H..0 (column index ``t + H``); the future
    covers 1..T. Agents flagged ``evaluated`` are present at t=0 and at
    every future step; other agents contribute past context only.
    """

    scene_id: str
    agents: list
    H: int
    T: int
    past_pos: np.ndarray        # (N, H+1, 2)
    past_present: np.ndarray    # (N, H+1) bool
    future_pos: np.ndarray      # (N, T, 2); rows of non-evaluated agents unused
    evaluated: np.ndarray       # (N,) bool
    past_vel: np.ndarray = None  # (N, H+1, 2), derived if omitted
    heading: np.ndarray | None = None   # (N, H+1) radians
    context: np.ndarray | None = None   # (N, d_ctx)
    source: str = ""
    start_frame: int = 0
    center_offset: np.ndarray | None = None
    _orig_past: np.ndarray | None = field(default=None, repr=False)
    _orig_future: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.agents)
        self.past_pos = np.asarray(self.past_pos, dtype=np.float64)
        self.past_present = np.asarray(self.past_present, dtype=bool)
        self.future_pos = np.asarray(self.future_pos, dtype=np.float64)
        self.evaluated = np.asarray(self.evaluated, dtype=bool)
        if self.past_pos.shape != (n, self.H + 1, 2):
            raise DataError(f"past_pos shape {self.past_pos.shape} != {(n, self.H + 1, 2)}")
        if self.future_pos.shape != (n, self.T, 2):
            raise DataError(f"future_pos shape {self.future_pos.shape} != {(n, self.T, 2)}")
        if not self.past_present[:, -1].all():
            raise DataError("every scene agent must be present at t=0")
        if not self.evaluated.any():
            raise DataError("scene must have at least one evaluated agent")
        if self.past_vel is None:
            self.past_vel = compute_velocities(self.past_pos, self.past_present)
        else:
            self.past_vel = np.asarray(self.past_vel, dtype=np.float64)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def eval_indices(self) -> np.ndarray:
        return np.flatnonzero(self.evaluated)

    def current_positions(self) -> np.ndarray:
        """Positions of all agents at t=0, shape (N, 2)."""
        return self.past_pos[:, -1, :]

    def state_dim(self) -> int:
        return 5 if self.heading is not None else 4

    def state_vector(self, agent_idx: int, t: int) -> np.ndarray:
        """State [x, y, vx, vy(, heading)] of one agent at past step t in [-H, 0]."""
        col = t + self.H
        parts = [self.past_pos[agent_idx, col], self.past_vel[agent_idx, col]]
        if self.heading is not None:
            parts.append(np.array([self.heading[agent_idx, col]]))
        return np.concatenate(parts)


def scene_center(scene: Scene) -> Scene:
    """Translate all positions so the mean agent position at t=0 is the origin.

    The translation is stored on the returned scene for inverse mapping;
    the original arrays are retained so the round trip is exact.
    """
    offset = scene.current_positions().mean(axis=0).copy()
    centered = replace(
        scene,
        past_pos=scene.past_pos - offset,
        future_pos=scene.future_pos - offset,
        past_vel=scene.past_vel.copy(),
        center_offset=offset,
        _orig_past=scene.past_pos.copy(),
        _orig_future=scene.future_pos.copy(),
    )
    return centered


def scene_uncenter(scene: Scene) -> Scene:
    """Inverse of :func:`scene_center`; restores the original frame exactly."""
    if scene.center_offset is None:
        return scene
    if scene._orig_past is not None:
        past = scene._orig_past
        future = scene._orig_future
    else:
        past = scene.past_pos + scene.center_offset
        future = scene.future_pos + scene.center_offset
    return replace(scene, past_pos=past, future_pos=future,
                   past_vel=scene.past_vel.copy(),
                   center_offset=None, _orig_past=None, _orig_future=None)


def uncenter_points(points: np.ndarray, scene: Scene) -> np.ndarray:
    """Map predicted points from the centered frame back to the source frame."""
    if scene.center_offset is None:
        return points
    return points + scene.center_offset


def rotate_augment(scene: Scene, seed_or_rng) -> Scene:
    """Rotate all positions, velocities, and headings by a uniform random
    angle about the origin. Intended for scene-centered scenes."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return rotate_scene(scene, theta)


def rotate_scene(scene: Scene, theta: float) -> Scene:
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    heading = scene.heading + theta if scene.heading is not None else None
    return replace(
        scene,
        past_pos=scene.past_pos @ rot.T,
        future_pos=scene.future_pos @ rot.T,
        past_vel=scene.past_vel @ rot.T,
        heading=heading,
        _orig_past=None, _orig_future=None,
    )


def build_scenes(records: list[TrajectoryRecord], H: int, T: int,
                 stride: int = 1, source: str = "") -> list[Scene]:
    """Slide a window of H+1+T consecutive timesteps over the records.

    Frame ids are remapped to consecutive timesteps after verifying a
    constant frame interval. Agents present at the window's t=0 and at
    every future step become evaluated; agents present at t=0 with an
    incomplete future are kept as context; agents absent at t=0 are
    dropped (connectivity needs a current position).
    """
    if H < 0 or T < 1 or stride < 1:
        raise DataError("build_scenes requires H >= 0, T >= 1, stride >= 1")
    if not records:
        return []
    frames = sorted({r.frame for r in records})
    if len(frames) > 1:
        intervals = {frames[i + 1] - frames[i] for i in range(len(frames) - 1)}
        if len(intervals) > 1:
            raise DataError(f"mixed frame intervals {sorted(intervals)} in {source or 'records'}")
    frame_to_step = {f: i for i, f in enumerate(frames)}

    by_agent: dict[int, dict[int, np.ndarray]] = {}
    for r in records:
        by_agent.setdefault(r.agent, {})[frame_to_step[r.frame]] = np.array([r.x, r.y])

    window = H + 1 + T
    scenes = []
    for start in range(0, len(frames) - window + 1, stride):
        t0 = start + H
        agent_ids = []
        for r in records:  # first-appearance order within the window
            step = frame_to_step[r.frame]
            if start <= step < start + window and r.agent not in agent_ids:
                if t0 in by_agent[r.agent]:
                    agent_ids.append(r.agent)
        if not agent_ids:
            continue
        n = len(agent_ids)
        past_pos = np.zeros((n, H + 1, 2))
        present = np.zeros((n, H + 1), dtype=bool)
        future = np.zeros((n, T, 2))
        evaluated = np.zeros(n, dtype=bool)
        for i, a in enumerate(agent_ids):
            steps = by_agent[a]
            for h in range(H + 1):
                st = start + h
                if st in steps:
                    past_pos[i, h] = steps[st]
                    present[i, h] = True
            future_steps = [start + H + 1 + t for t in range(T)]
            if all(st in steps for st in future_steps):
                evaluated[i] = True
                for t, st in enumerate(future_steps):
                    future[i, t] = steps[st]
        if not evaluated.any():
            continue
        scenes.append(Scene(
            scene_id=f"{source or 'records'}:{frames[start]}",
            agents=agent_ids, H=H, T=T,
            past_pos=past_pos, past_present=present,
            future_pos=future, evaluated=evaluated,
            source=source, start_frame=frames[start],
        ))
    return scenes


# ---------------------------------------------------------------------------
# synthetic scenarios
# ---------------------------------------------------------------------------

SYNTHETIC_KINDS = ("crossing", "following", "avoidance")


def _crossing_tracks(rng: np.random.Generator, steps: int, H: int) -> list[np.ndarray]:
    """Straight constant-velocity paths whose crossing point lies after t=0."""
    n = int(rng.integers(2, 4))
    base = rng.uniform(0.0, 2.0 * math.pi)
    tracks = []
    cross_t = H + rng.uniform(2.0, steps - H - 2.0)
    for i in range(n):
        angle = base + i * rng.uniform(1.0, 2.1) + rng.normal(0.0, 0.1)
        speed = rng.uniform(0.4, 0.9)
        hub = rng.normal(0.0, 0.5, size=2)  # near-miss offsets, not a shared point
        direction = np.array([math.cos(angle), math.sin(angle)])
        t = np.arange(steps)[:, None]
        tracks.append(hub + (t - (cross_t + i)) * speed * direction)
    return tracks


def _following_tracks(rng: np.random.Generator, steps: int, H: int) -> list[np.ndarray]:
    """A gently turning leader traced by 1-2 followers at fixed lags."""
    n = int(rng.integers(2, 4))
    lag = int(rng.integers(2, 4))
    speed = rng.uniform(0.4, 0.8)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    turn = rng.uniform(-0.06, 0.06)
    total = steps + lag * (n - 1)
    pos = np.zeros((total, 2))
    pos[0] = rng.normal(0.0, 1.0, size=2)
    for t in range(1, total):
        heading += turn
        pos[t] = pos[t - 1] + speed * np.array([math.cos(heading), math.sin(heading)])
    tracks = []
    for i in range(n):
        shift = lag * (n - 1 - i)
        tracks.append(pos[shift:shift + steps].copy())
    return tracks


def _avoidance_tracks(rng: np.random.Generator, steps: int, H: int) -> list[np.ndarray]:
    """Two agents approach head-on and veer laterally around the meeting time."""
    speed = rng.uniform(0.4, 0.8)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    direction = np.array([math.cos(angle), math.sin(angle)])
    lateral = np.array([-direction[1], direction[0]])
    meet_t = H + rng.uniform(3.0, max(4.0, steps - H - 3.0))
    gap = rng.normal(0.0, 0.3)
    amp = rng.uniform(0.8, 1.6)
    width = rng.uniform(2.0, 3.5)
    t = np.arange(steps)
    bump = amp * np.exp(-((t - meet_t) ** 2) / (2.0 * width * width))
    a = (t[:, None] - meet_t) * speed * direction + (bump[:, None] + gap) * lateral
    b = (meet_t - t[:, None]) * speed * direction - (bump[:, None] + gap) * lateral
    tracks = [a, b]
    if rng.random() < 0.4:  # occasional uninvolved bystander
        side = rng.uniform(4.0, 7.0)
        sp = rng.uniform(0.3, 0.7)
        c = side * lateral + (t[:, None] - meet_t) * sp * direction
        tracks.append(c)
    return tracks


_GENERATORS = {
    "crossing": _crossing_tracks,
    "following": _following_tracks,
    "avoidance": _avoidance_tracks,
}


def generate_synthetic(kind: str, n_scenes: int, noise: float, seed: int,
                       H: int = 7, T: int = 12) -> list[Scene]:
    """Parametric multi-agent scenarios with Gaussian position noise.

    ``kind`` is one of crossing/following/avoidance, or "mixed" to cycle
    through all three. Deterministic given the seed.
    """
    kinds = SYNTHETIC_KINDS if kind == "mixed" else (kind,)
    for k in kinds:
        if k not in _GENERATORS:
            raise DataError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng(seed)
    steps = H + 1 + T
    scenes = []
    for i in range(n_scenes):
        k = kinds[i % len(kinds)]
        tracks = _GENERATORS[k](rng, steps, H)
        n = len(tracks)
        pos = np.stack(tracks)  # (N, steps, 2)
        if noise > 0:
            pos = pos + rng.normal(0.0, noise, size=pos.shape)
        scenes.append(Scene(
            scene_id=f"{k}:{i}",
            agents=list(range(n)), H=H, T=T,
            past_pos=pos[:, :H + 1], past_present=np.ones((n, H + 1), dtype=bool),
            future_pos=pos[:, H + 1:], evaluated=np.ones(n, dtype=bool),
            source="synthetic",
        ))
    return scenes


# ---------------------------------------------------------------------------
# metrics and baseline
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    """K predicted futures for the evaluated agents of one scene."""

    futures: np.ndarray  # (K, M, T, 2)

    def __post_init__(self):
        self.futures = np.asarray(self.futures, dtype=np.float64)
        if self.futures.ndim != 4 or self.futures.shape[0] < 1:
            raise DataError(f"SampleSet needs shape (K, M, T, 2), got {self.futures.shape}")

    @property
    def k(self) -> int:
        return self.futures.shape[0]


@dataclass
class MetricResult:
    ade_per_agent: np.ndarray
    fde_per_agent: np.ndarray

    @property
    def ade(self) -> float:
        return float(self.ade_per_agent.mean())

    @property
    def fde(self) -> float:
        return float(self.fde_per_agent.mean())


def ade_fde(samples: SampleSet, truth: np.ndarray, squared: bool = False) -> MetricResult:
    """Best-of-K displacement errors, minimized independently per agent.

    ADE averages the per-step displacement over the horizon before taking
    the minimum over samples; FDE uses the final step only. Displacement
    is the Euclidean distance unless ``squared``.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if samples.futures.shape[1:] != truth.shape:
        raise DataError(f"sample shape {samples.futures.shape[1:]} != truth shape {truth.shape}")
    diff = samples.futures - truth[None]
    dist = np.linalg.norm(diff, axis=-1)  # (K, M, T)
    if squared:
        dist = dist * dist
    ade_k = dist.mean(axis=2)             # (K, M)
    fde_k = dist[:, :, -1]                # (K, M)
    return MetricResult(ade_per_agent=ade_k.min(axis=0), fde_per_agent=fde_k.min(axis=0))


def constant_velocity_baseline(scene: Scene) -> SampleSet:
    """Extrapolate each evaluated agent from its t=0 position with its last
    observed velocity for T steps (K=1)."""
    idx = scene.eval_indices
    p0 = scene.past_pos[idx, -1, :]
    v = scene.past_vel[idx, -1, :]
    steps = np.arange(1, scene.T + 1)[None, :, None]
    pred = p0[:, None, :] + steps * v[:, None, :]
    return SampleSet(futures=pred[None])
