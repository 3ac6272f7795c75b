"""Seeded synthetic scenarios: multi-mode flight corpora, weather lattices and airport conditions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .env import REFERENCE_BBOX
from .geo import DEG, EARTH_RADIUS, GeoPosition, Trajectory, enu_array
from .preprocess import (
    ARRIVAL_FEATURES,
    WEATHER_FEATURES,
    ArrivalConditionsTable,
    WeatherGrid,
    enrich,
    resample,
)

DEST_AIRPORT = "DEST"
EPOCH_START = 1459468800  # 2016-04-01T00:00:00Z


class ScenarioError(ValueError):
    pass


@dataclass
class ModeSpec:
    offset_km: float
    cruise_alt: float
    prior: float


def _default_modes():
    return [ModeSpec(18.0, 3000.0, 0.5), ModeSpec(-18.0, 3600.0, 0.5)]


@dataclass
class ScenarioSpec:
    origin: tuple = (0.20, 40.80, 300.0)
    dest: tuple = (-1.30, 40.55, 600.0)
    n_trajectories: int = 100
    modes: list = field(default_factory=_default_modes)
    speed: float = 200.0
    climb_rate: float = 12.0
    descent_rate: float = 10.0
    # noise scales
    apex_jitter_km: float = 1.5
    speed_jitter: float = 0.03
    alt_jitter: float = 150.0
    point_noise_h: float = 20.0
    point_noise_v: float = 10.0
    sample_jitter: int = 2
    raw_interval: int = 6
    # arrival conditions
    arrival_separation: float = 1.0
    arrival_block_hours: int = 6
    dt: int = 5
    bbox: tuple = REFERENCE_BBOX
    start_time: int = EPOCH_START
    span_hours: int = 48
    seed: int = 0

    def __post_init__(self):
        self.modes = [m if isinstance(m, ModeSpec) else ModeSpec(**m) for m in self.modes]
        self.origin = tuple(float(v) for v in self.origin)
        self.dest = tuple(float(v) for v in self.dest)
        self.bbox = tuple(tuple(float(v) for v in c) for c in self.bbox)
        priors = np.array([m.prior for m in self.modes])
        if len(self.modes) < 1 or abs(priors.sum() - 1.0) > 1e-9 or np.any(priors <= 0):
            raise ScenarioError("mode priors must be positive and sum to 1")
        if any(c < 2 for c in self.mode_counts()):
            raise ScenarioError("every mode needs at least two trajectories")

    @property
    def origin_pos(self) -> GeoPosition:
        return GeoPosition(*self.origin)

    @property
    def dest_pos(self) -> GeoPosition:
        return GeoPosition(*self.dest)

    def mode_counts(self) -> list[int]:
        return _allocate(self.n_trajectories, [m.prior for m in self.modes])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["origin"] = list(self.origin)
        d["dest"] = list(self.dest)
        d["bbox"] = [list(c) for c in self.bbox]
        return d

    @classmethod
    def from_dict(cls, d) -> "ScenarioSpec":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})


def _allocate(n: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder integer split of ``n`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=float)
    exact = n * w / w.sum()
    base = np.floor(exact).astype(int)
    rest = n - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rest]] += 1
    return base.tolist()


@dataclass
class Scenario:
    spec: ScenarioSpec
    trajectories: list
    grid: WeatherGrid
    arrivals: ArrivalConditionsTable

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.meta["mode"] for t in self.trajectories], dtype=int)


# --- weather -----------------------------------------------------------------------


_WEATHER_BASE = np.array([101300.0, 55.0, 275.0, 6.0, 8.0, -3.0])
_WEATHER_AMP = np.array([600.0, 15.0, 3.0, 2.5, 5.0, 5.0])


def _weather_field(rng):
    waves = []
    for _ in WEATHER_FEATURES:
        k = rng.uniform(1.5, 4.0, size=(3, 2)) * rng.choice([-1, 1], size=(3, 2))
        phase = rng.uniform(0, 2 * math.pi, size=3)
        tphase = rng.uniform(0, 2 * math.pi)
        waves.append((k, phase, tphase))

    def field_at(lon, lat, alt, t):
        out = []
        for f, (k, phase, tphase) in enumerate(waves):
            s = sum(np.sin(k[j, 0] * lon + k[j, 1] * lat + phase[j]) for j in range(3)) / 3.0
            s = s + 0.05 * np.sin(2 * math.pi * t / 86400.0 + tphase)
            v = _WEATHER_BASE[f] + _WEATHER_AMP[f] * s
            if f == 0:
                v = v * np.exp(-np.maximum(alt, 0.0) / 8000.0)
            elif f == 2:
                v = v - 0.0065 * alt
            elif f in (4, 5):
                v = v * (1.0 + alt / 10000.0)
            out.append(v)
        return np.stack(out, axis=-1)

    return field_at


def make_weather_grid(spec: ScenarioSpec, rng, t_end: int) -> WeatherGrid:
    (x1, y1), (x2, y2) = spec.bbox
    lon0, lon1 = min(x1, x2) - 0.4, max(x1, x2) + 0.4
    lat0, lat1 = min(y1, y2) - 0.4, max(y1, y2) + 0.4
    cell = (0.2, 0.2, 2000.0, 10800.0)
    origin = (lon0, lat0, -1000.0, float(spec.start_time - 10800))
    n = (
        int(math.ceil((lon1 - lon0) / cell[0])) + 1,
        int(math.ceil((lat1 - lat0) / cell[1])) + 1,
        int(math.ceil((21000.0 - origin[2]) / cell[2])) + 1,
        int(math.ceil((t_end + 2 * 10800 - origin[3]) / cell[3])) + 1,
    )
    axes = [origin[i] + cell[i] * np.arange(n[i]) for i in range(4)]
    mesh = np.meshgrid(*axes, indexing="ij")
    values = _weather_field(rng)(*mesh)
    return WeatherGrid(origin, cell, values, WEATHER_FEATURES)


# --- airport conditions ------------------------------------------------------------------


_ARRIVAL_STD = np.array([20.0, 2.0, 0.05, 1.0, 3.0])


def _arrival_means(n_modes: int, separation: float) -> np.ndarray:
    m = np.arange(n_modes, dtype=float)
    means = np.column_stack([
        (40.0 + 360.0 * m / max(n_modes, 1)) % 360.0,
        8.0 + 6.0 * m,
        29.92 + 0.15 * (m - (n_modes - 1) / 2.0),
        10.0 - 2.0 * m,
        12.0 + 6.0 * m,
    ])
    grand = means.mean(axis=0)
    return grand + separation * (means - grand)


def make_arrivals(spec: ScenarioSpec, rng) -> tuple[ArrivalConditionsTable, np.ndarray]:
    """Hourly conditions; each block of hours follows one mode's weather regime."""
    n_buckets = spec.span_hours
    n_modes = len(spec.modes)
    block = max(1, spec.arrival_block_hours)
    n_blocks = int(math.ceil(n_buckets / block))
    priors = [m.prior for m in spec.modes]
    regimes = list(rng.permutation(n_modes)) + list(rng.choice(n_modes, size=max(0, n_blocks - n_modes), p=priors))
    regime = np.repeat(np.array(regimes[:n_blocks], dtype=int), block)[:n_buckets]
    means = _arrival_means(n_modes, spec.arrival_separation)
    entries = {}
    base = spec.start_time - spec.start_time % 3600
    for b in range(n_buckets):
        x = means[regime[b]] + _ARRIVAL_STD * rng.standard_normal(len(ARRIVAL_FEATURES))
        x[0] %= 360.0
        x[[1, 3, 4]] = np.maximum(x[[1, 3, 4]], 0.0)
        entries[(DEST_AIRPORT, base + 3600 * b)] = tuple(float(v) for v in x)
    return ArrivalConditionsTable(3600, entries, ARRIVAL_FEATURES), regime


# --- flights ---------------------------------------------------------------------------------


def _from_enu(ref: np.ndarray, enu: np.ndarray) -> np.ndarray:
    k = EARTH_RADIUS * DEG
    lon = ref[0] + enu[:, 0] / (k * math.cos(ref[1] * DEG))
    lat = ref[1] + enu[:, 1] / k
    return np.column_stack([lon, lat, enu[:, 2]])


def _flight(spec: ScenarioSpec, mode: ModeSpec, arrival: int, rng, ident: str) -> Trajectory:
    dest = np.array(spec.dest)
    o = enu_array(dest, np.array(spec.origin))[:2]
    d = np.zeros(2)
    axis = d - o
    normal = np.array([-axis[1], axis[0]]) / np.linalg.norm(axis)
    apex = mode.offset_km * 1000.0 + spec.apex_jitter_km * 1000.0 * rng.standard_normal()
    s = np.linspace(0.0, 1.0, 2001)
    lateral = apex * 27.0 / 4.0 * s**2 * (1.0 - s)
    path = o[None, :] + s[:, None] * axis[None, :] + lateral[:, None] * normal[None, :]
    arclen = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(path, axis=0), axis=1))])
    total = arclen[-1]
    speed = spec.speed * (1.0 + spec.speed_jitter * rng.standard_normal())
    duration = int(round(total / speed))
    cruise = mode.cruise_alt + spec.alt_jitter * rng.standard_normal()
    # raw surveillance times: irregular integer gaps ending exactly at arrival
    gaps = spec.raw_interval + (rng.integers(-spec.sample_jitter, spec.sample_jitter + 1, size=duration)
                                if spec.sample_jitter else np.zeros(duration, dtype=int))
    rel = np.concatenate([[0], np.cumsum(np.maximum(gaps, 1))])
    rel = rel[rel < duration]
    rel = np.append(rel, duration)
    flown = np.minimum(rel * speed, total)
    east = np.interp(flown, arclen, path[:, 0])
    north = np.interp(flown, arclen, path[:, 1])
    tau = rel.astype(float)
    alt = np.minimum.reduce([
        spec.origin[2] + spec.climb_rate * tau,
        np.full_like(tau, cruise),
        spec.dest[2] + spec.descent_rate * (duration - tau),
    ])
    enu = np.column_stack([east, north, alt])
    enu[:, :2] += spec.point_noise_h * rng.standard_normal((len(enu), 2))
    enu[:, 2] += spec.point_noise_v * rng.standard_normal(len(enu))
    # pin the end points so the flight starts and ends at the airports
    enu[0] = np.append(o, spec.origin[2])
    enu[-1] = np.array([0.0, 0.0, spec.dest[2]])
    pos = _from_enu(dest, enu)
    (x1, y1), (x2, y2) = spec.bbox
    if (pos[:, 0].min() < min(x1, x2) or pos[:, 0].max() > max(x1, x2)
            or pos[:, 1].min() < min(y1, y2) or pos[:, 1].max() > max(y1, y2)):
        raise ScenarioError(f"mode with offset {mode.offset_km} km leaves the bounding box")
    times = arrival - duration + rel
    return Trajectory(ident, times, pos, np.zeros((len(times), 0)), (),
                      spec.origin_pos, spec.dest_pos)


def generate(spec: ScenarioSpec, raw: bool = False) -> Scenario:
    """Build a labelled corpus.

    With ``raw=True`` the trajectories are the irregular surveillance-like
    tracks; otherwise they are resampled at ``spec.dt`` and enriched with
    weather and arrival conditions.
    """
    root = np.random.SeedSequence(spec.seed)
    s_arr, s_modes, s_wx, s_flights = root.spawn(4)
    arrivals, regime = make_arrivals(spec, np.random.default_rng(s_arr))
    mrng = np.random.default_rng(s_modes)
    counts = spec.mode_counts()
    modes = np.concatenate([np.full(c, m) for m, c in enumerate(counts)])
    modes = modes[mrng.permutation(len(modes))]
    base = spec.start_time - spec.start_time % 3600
    trajs = []
    last_t = spec.start_time
    flight_seeds = s_flights.spawn(len(modes))
    for i, m in enumerate(modes):
        frng = np.random.default_rng(flight_seeds[i])
        buckets = np.flatnonzero(regime == m)
        # keep early buckets free so departures stay after the scenario start
        buckets = buckets[buckets >= 1]
        if not len(buckets):
            raise ScenarioError(f"no arrival hours follow mode {m}")
        b = int(frng.choice(buckets))
        arrival = base + 3600 * b + int(frng.integers(120, 3600 - 120))
        tr = _flight(spec, spec.modes[m], arrival, frng, f"F{i:04d}")
        tr = tr.replace(meta={"mode": int(m)})
        trajs.append(tr)
        last_t = max(last_t, int(tr.times[-1]))
    grid = make_weather_grid(spec, np.random.default_rng(s_wx), last_t + 1000 * spec.dt)
    if not raw:
        trajs = [enrich(resample(t, spec.dt), grid, arrivals, DEST_AIRPORT) for t in trajs]
    return Scenario(spec, trajs, grid, arrivals)


def split(items: Sequence, test_fraction: float | None = None, seed: int = 0, labels=None,
          n_test: int | None = None):
    """Seeded train/test split without replacement, stratified by ``labels``."""
    n = len(items)
    if n_test is None:
        if test_fraction is None or not 0.0 < test_fraction < 1.0:
            raise ValueError("test fraction must be in (0, 1)")
        n_test = int(round(test_fraction * n))
    if not 0 < n_test < n:
        raise ValueError("split leaves one side empty")
    labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    sizes = [int((labels == c).sum()) for c in classes]
    per_class = _allocate(n_test, sizes)
    test_idx = []
    for c, k in zip(classes, per_class):
        members = np.flatnonzero(labels == c)
        test_idx.extend(rng.choice(members, size=k, replace=False).tolist())
    test_set = set(test_idx)
    train = [items[i] for i in range(n) if i not in test_set]
    test = [items[i] for i in sorted(test_set)]
    return train, test
