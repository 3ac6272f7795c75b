"""Episodic rollout environment: start states, kinematic transition, termination, batch collection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geo import EnrichedState, DeltaAction, GeoPosition, Trajectory, apply_action, horizontal_distance
from .preprocess import WeatherGrid

# bounding box corners used in the reference experiments (lon, lat)
REFERENCE_BBOX = ((-3.7038, 41.4), (2.9504, 39.9864))

REACHED_DEST = "reached_dest"
MAX_LEN = "max_len"
OUT_OF_BOUNDS = "out_of_bounds"
_REASONS = (None, REACHED_DEST, MAX_LEN, OUT_OF_BOUNDS)
# rollouts may climb, descend or run past the lattice; only the horizontal extent can miss
VERTICAL_AND_TIME = (2, 3)


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EnvConfig:
    dest: GeoPosition
    grid: WeatherGrid
    dt: int = 5
    dest_radius: float = 5000.0
    max_len: int = 1000
    bbox: tuple = REFERENCE_BBOX

    def __post_init__(self):
        if self.dest_radius <= 0 or self.max_len < 1 or self.dt <= 0:
            raise ValueError("dest_radius, max_len and dt must be positive")
        (x1, y1), (x2, y2) = self.bbox
        if x1 == x2 or y1 == y2:
            raise ValueError("bounding box is degenerate")

    @property
    def lon_bounds(self):
        (x1, _), (x2, _) = self.bbox
        return min(x1, x2), max(x1, x2)

    @property
    def lat_bounds(self):
        (_, y1), (_, y2) = self.bbox
        return min(y1, y2), max(y1, y2)

    def inside(self, pos) -> np.ndarray:
        pos = np.atleast_2d(pos)
        lo, hi = self.lon_bounds
        la, lb = self.lat_bounds
        return (pos[:, 0] >= lo) & (pos[:, 0] <= hi) & (pos[:, 1] >= la) & (pos[:, 1] <= lb)


def state_rows(positions, times, weather, context=None) -> np.ndarray:
    """Raw network input rows: lon, lat, alt, t, weather features [, context]."""
    positions = np.atleast_2d(positions)
    cols = [positions, np.asarray(times, dtype=float).reshape(-1, 1), np.atleast_2d(weather)]
    if context is not None and np.size(context):
        cols.append(np.broadcast_to(np.atleast_2d(context), (len(positions), np.shape(context)[-1])))
    return np.hstack(cols)


def transition(cfg: EnvConfig, pos, t, n_points, actions):
    """Vectorised step. Returns next positions, times, weather and reason codes.

    ``n_points`` is the episode length in points *after* this step. Reason
    codes index ``(None, reached_dest, max_len, out_of_bounds)``; priority
    follows that order.
    """
    pos2 = np.asarray(pos, dtype=float) + np.asarray(actions, dtype=float)
    t2 = np.asarray(t) + cfg.dt
    reached = horizontal_distance(cfg.dest.as_array(), pos2, cfg.dest.as_array()) <= cfg.dest_radius
    inside = cfg.inside(pos2)
    full = np.asarray(n_points) >= cfg.max_len
    code = np.where(reached, 1, np.where(full, 2, np.where(~inside, 3, 0)))
    covered = cfg.grid.covers(pos2, t2, VERTICAL_AND_TIME)
    if np.any(inside & ~covered):
        i = int(np.flatnonzero(inside & ~covered)[0])
        raise EnvError(f"weather grid miss inside the bounding box at {pos2[i].tolist()}, t={int(t2[i])}")
    weather = np.zeros((len(pos2), len(cfg.grid.names)))
    if covered.any():
        weather[covered] = cfg.grid.lookup(pos2[covered], t2[covered], VERTICAL_AND_TIME)
    return pos2, t2, weather, code, covered


def step(s: EnrichedState, a: DeltaAction, cfg: EnvConfig, n_points: int = 2):
    """Advance one state. ``n_points`` counts episode points including the new one."""
    nxt = apply_action(s, a)
    _, t2, weather, code, covered = transition(cfg, np.array([[s.position.lon, s.position.lat, s.position.alt]]),
                                                np.array([s.timestamp]), np.array([n_points]), [a.as_array()])
    feats = weather[0] if covered[0] else np.asarray(s.features[: len(cfg.grid.names)], dtype=float)
    return EnrichedState(nxt, int(t2[0]), tuple(float(v) for v in feats)), _REASONS[int(code[0])]


@dataclass(eq=False)
class StartSampler:
    """Uniform sampling over (trajectory, state index) pairs of a training set.

    ``contexts`` optionally gives one context vector per trajectory
    (appended to every state of episodes started from it).
    """

    trajectories: Sequence[Trajectory]
    contexts: np.ndarray | None = None
    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("start sampler needs at least one trajectory")
        self._offsets = np.cumsum([0] + [len(t) for t in self.trajectories])

    @property
    def n_pairs(self) -> int:
        return int(self._offsets[-1])

    def locate(self, k: int) -> tuple[int, int]:
        tr = int(np.searchsorted(self._offsets, k, side="right") - 1)
        return tr, int(k - self._offsets[tr])

    def draw(self, rng) -> tuple[int, int]:
        return self.locate(int(rng.integers(self.n_pairs)))

    def context(self, tr: int):
        return None if self.contexts is None else np.asarray(self.contexts[tr], dtype=float)


def sample_initial(trajectories: Sequence[Trajectory], mode: str, rng=None, fraction: float = 0.0,
                   index: int = 0) -> EnrichedState:
    """Training mode: uniform over (trajectory, state) pairs. Evaluation mode: state
    ``floor(fraction * (|T| - 1))`` of trajectory ``index``."""
    if not trajectories:
        raise ValueError("empty trajectory set")
    if mode == "train":
        tr, i = StartSampler(trajectories).draw(rng)
        return trajectories[tr].state(i)
    if mode == "eval":
        traj = trajectories[index]
        return traj.state(start_index(traj, fraction))
    raise ValueError(f"unknown sampling mode {mode!r}")


def start_index(traj: Trajectory, fraction: float) -> int:
    if not 0.0 <= fraction < 1.0:
        raise ValueError("start fraction must be in [0, 1)")
    return int(math.floor(fraction * (len(traj) - 1)))


@dataclass(eq=False)
class Episode:
    states: np.ndarray          # (n + 1, d) raw state rows
    actions: np.ndarray         # (n, 3)
    reason: str
    start: tuple = ()

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :3]

    @property
    def times(self) -> np.ndarray:
        return self.states[:, 3].astype(np.int64)

    def __len__(self):
        return len(self.actions)


@dataclass(eq=False)
class RolloutBatch:
    episodes: list

    @property
    def n_samples(self) -> int:
        return sum(len(e) for e in self.episodes)

    def pairs(self):
        """Stacked (states, actions) over all state-action samples."""
        s = np.concatenate([e.states[:-1] for e in self.episodes])
        a = np.concatenate([e.actions for e in self.episodes])
        return s, a

    def reasons(self) -> list[str]:
        return [e.reason for e in self.episodes]


def run_episodes(policy, cfg: EnvConfig, starts, noises, contexts=None) -> list[Episode]:
    """Roll out several episodes in lockstep.

    ``starts`` is a list of EnrichedState; ``noises`` an array (B, max_len, action_dim)
    of standard normal draws consumed one row per step; ``policy.act(rows, noise)``
    maps raw state rows to raw actions.
    """
    b = len(starts)
    pos = np.array([[s.position.lon, s.position.lat, s.position.alt] for s in starts])
    t = np.array([s.timestamp for s in starts], dtype=np.int64)
    wx = np.array([s.features[: len(cfg.grid.names)] for s in starts], dtype=float).reshape(b, -1)
    ctx = [None] * b if contexts is None else contexts
    rows = [[state_rows(pos[i], [t[i]], wx[i], ctx[i])[0]] for i in range(b)]
    acts = [[] for _ in range(b)]
    reason = [None] * b
    alive = np.arange(b)
    k = 0
    while len(alive):
        cur = np.array([rows[i][-1] for i in alive])
        a = policy.act(cur, noises[alive, k])
        pos2, t2, w2, code, covered = transition(cfg, cur[:, :3], cur[:, 3], np.full(len(alive), k + 2), a)
        w2[~covered] = cur[~covered, 4: 4 + w2.shape[1]]
        still = []
        for j, i in enumerate(alive):
            acts[i].append(a[j])
            rows[i].append(state_rows(pos2[j], [t2[j]], w2[j], ctx[i])[0])
            if code[j]:
                reason[i] = _REASONS[int(code[j])]
            else:
                still.append(i)
        alive = np.array(still, dtype=np.int64)
        k += 1
    return [Episode(np.array(rows[i]), np.array(acts[i]).reshape(-1, noises.shape[-1]), reason[i])
            for i in range(b)]


def seed_key(*parts) -> list[int]:
    """Flatten ints and (nested) int sequences into one seed-sequence entropy list."""
    out: list[int] = []
    for p in parts:
        if isinstance(p, (list, tuple, np.ndarray)):
            out.extend(seed_key(*p))
        else:
            out.append(int(p))
    return out


def episode_rng(seed, k: int):
    return np.random.default_rng(seed_key(seed, k))


def collect(policy, cfg: EnvConfig, n_samples: int, seed, sampler: StartSampler,
            action_dim: int = 3) -> RolloutBatch:
    """Whole episodes until at least ``n_samples`` state-action pairs are gathered.

    Episode ``k`` draws its start and noise from its own stream keyed by
    ``(seed, k)``, so the batch does not depend on how episodes are grouped
    for vectorised simulation.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    episodes: list[Episode] = []
    total = 0
    k = 0
    mean_len = None
    while total < n_samples:
        remaining = n_samples - total
        wave = 1 if mean_len is None else max(1, int(math.ceil(remaining / max(mean_len, 1.0))))
        wave = min(wave, 256)
        starts, noises, ctxs, tags = [], [], [], []
        for j in range(k, k + wave):
            rng = episode_rng(seed, j)
            tr, i = sampler.draw(rng)
            starts.append(sampler.trajectories[tr].state(i))
            noises.append(rng.standard_normal((cfg.max_len, action_dim)))
            ctxs.append(sampler.context(tr))
            tags.append((tr, i))
        eps = run_episodes(policy, cfg, starts, np.array(noises),
                           None if sampler.contexts is None else ctxs)
        for e, tag in zip(eps, tags):
            if total >= n_samples:
                break
            e.start = tag
            episodes.append(e)
            total += len(e)
        k += wave
        mean_len = total / len(episodes)
    return RolloutBatch(episodes)


class PolicyActor:
    """Adapter giving a GaussianPolicy the ``act(rows, noise)`` interface.

    ``noise_scale`` 0 yields the deterministic mean rollout.
    """

    def __init__(self, policy, noise_scale: float = 1.0):
        self.policy = policy
        self.noise_scale = noise_scale

    def act(self, rows, noise):
        p = self.policy
        mu = p.mean(p.norm_state(rows))
        return p.denorm_action(mu + self.noise_scale * p.std * noise)
