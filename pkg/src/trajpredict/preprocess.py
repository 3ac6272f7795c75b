"""Resampling, cleaning, weather enrichment, action derivation and feature scaling."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geo import (
    DeltaAction,
    EnrichedState,
    GeoPosition,
    Trajectory,
    TrajectoryError,
    horizontal_distance,
)

R_NEAR = 10_000.0
V_MAX = 350.0

WEATHER_FEATURES = (
    "pressure_surface",
    "relative_humidity_isobaric",
    "temperature_isobaric",
    "wind_speed_gust_surface",
    "u_wind_isobaric",
    "v_wind_isobaric",
)
ARRIVAL_FEATURES = (
    "wind_direction",
    "wind_speed_kt",
    "altimeter_inhg",
    "visibility_mi",
    "wind_gust_kt",
)


class GridMissError(LookupError):
    def __init__(self, index: int, point):
        super().__init__(f"state {index} at {tuple(float(v) for v in point)} is outside the weather grid")
        self.index = index


# --- resampling / cleaning ---------------------------------------------------


def resample(raw: Trajectory, dt: int) -> Trajectory:
    """Constant-velocity interpolation onto t0, t0+dt, ... up to the last raw timestamp."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    t = raw.times.astype(float)
    grid = np.arange(raw.times[0], raw.times[-1] + 1, dt, dtype=np.int64)
    if len(grid) < 2:
        raise TrajectoryError(f"trajectory {raw.id!r} spans less than one resampling step")
    g = grid.astype(float)
    pos = np.column_stack([np.interp(g, t, raw.positions[:, j]) for j in range(3)])
    feats = np.column_stack(
        [np.interp(g, t, raw.features[:, j]) for j in range(raw.features.shape[1])]
    ) if raw.features.shape[1] else np.zeros((len(grid), 0))
    return raw.replace(times=grid, positions=pos, features=feats)


def clean(
    trajectories: Sequence[Trajectory],
    origin: GeoPosition,
    dest: GeoPosition,
    r_near: float = R_NEAR,
    v_max: float = V_MAX,
):
    """Split into kept trajectories and ``(trajectory, reason)`` rejections.

    Reasons: ``incomplete_start``, ``incomplete_end``, ``speed_violation``.
    Distances are horizontal, measured in the destination's local frame.
    """
    ref = dest.as_array()
    kept, rejected = [], []
    for tr in trajectories:
        reason = _reject_reason(tr, origin.as_array(), ref, r_near, v_max)
        if reason is None:
            kept.append(tr)
        else:
            rejected.append((tr, reason))
    return kept, rejected


def _reject_reason(tr, origin, dest, r_near, v_max):
    if horizontal_distance(dest, tr.positions[0], origin) > r_near:
        return "incomplete_start"
    if horizontal_distance(dest, tr.positions[-1], dest) > r_near:
        return "incomplete_end"
    step = horizontal_distance(dest, tr.positions[1:], tr.positions[:-1])
    speed = step / np.diff(tr.times)
    if np.any(speed > v_max):
        return "speed_violation"
    return None


# --- weather -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WeatherGrid:
    """Regular (lon, lat, alt, time) lattice of en-route weather features.

    ``values`` has shape (n_lon, n_lat, n_alt, n_t, n_features); node ``i`` on
    an axis sits at ``origin + i * cell``.
    """

    origin: tuple[float, float, float, float]
    cell: tuple[float, float, float, float]
    values: np.ndarray
    names: tuple[str, ...] = WEATHER_FEATURES

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if v.ndim != 5 or v.shape[-1] != len(self.names):
            raise ValueError("weather values must be (lon, lat, alt, t, feature)")
        if not np.all(np.isfinite(v)):
            raise ValueError("weather grid has non-finite values")
        if any(c <= 0 for c in self.cell):
            raise ValueError("cell sizes must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[:4]

    def extent(self, axis: int) -> tuple[float, float]:
        lo = self.origin[axis]
        return lo, lo + (self.shape[axis] - 1) * self.cell[axis]

    def indices(self, positions, times, clamp_axes: tuple = ()) -> np.ndarray:
        """Nearest node per axis, ties to the lower index; -1 rows mark misses.

        Axes listed in ``clamp_axes`` (0 lon, 1 lat, 2 alt, 3 time) never miss:
        points beyond the lattice take the nearest edge node.
        """
        pts = np.column_stack([np.asarray(positions, dtype=float).reshape(-1, 3),
                               np.asarray(times, dtype=float).reshape(-1)])
        u = (pts - np.asarray(self.origin)) / np.asarray(self.cell)
        idx = np.ceil(u - 0.5).astype(np.int64)
        for ax in clamp_axes:
            idx[:, ax] = np.clip(idx[:, ax], 0, self.shape[ax] - 1)
        ok = np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=1)
        idx[~ok] = -1
        return idx

    def lookup(self, positions, times, clamp_axes: tuple = ()) -> np.ndarray:
        idx = self.indices(positions, times, clamp_axes)
        bad = np.flatnonzero(idx[:, 0] < 0)
        if len(bad):
            i = int(bad[0])
            raise GridMissError(i, np.asarray(positions).reshape(-1, 3)[i])
        return self.values[idx[:, 0], idx[:, 1], idx[:, 2], idx[:, 3]]

    def covers(self, positions, times, clamp_axes: tuple = ()) -> np.ndarray:
        return self.indices(positions, times, clamp_axes)[:, 0] >= 0

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lon_idx", "lat_idx", "alt_idx", "t_idx", *self.names])
            for idx in np.ndindex(*self.shape):
                w.writerow([*idx, *(repr(float(v)) for v in self.values[idx])])
        geom = {"version": 1, "origin": list(self.origin), "cell": list(self.cell),
                "shape": list(self.shape), "names": list(self.names)}
        _sidecar(path).write_text(json.dumps(geom, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "WeatherGrid":
        path = Path(path)
        geom = json.loads(_sidecar(path).read_text())
        names = tuple(geom["names"])
        values = np.full((*geom["shape"], len(names)), np.nan)
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header[4:] != list(names):
                raise ValueError(f"{path}: feature columns disagree with the geometry file")
            for row in r:
                idx = tuple(int(x) for x in row[:4])
                values[idx] = [float(x) for x in row[4:]]
        if np.isnan(values).any():
            raise ValueError(f"{path}: lattice has missing nodes")
        return cls(tuple(geom["origin"]), tuple(geom["cell"]), values, names)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".geometry.json")


@dataclass(frozen=True, eq=False)
class ArrivalConditionsTable:
    """Airport conditions per (airport, time bucket); keys hold bucket start seconds."""

    bucket_seconds: int
    entries: dict = field(default_factory=dict)
    names: tuple[str, ...] = ARRIVAL_FEATURES

    def bucket(self, t) -> int:
        return int(t // self.bucket_seconds) * self.bucket_seconds

    def lookup(self, airport: str, t) -> np.ndarray:
        key = (airport, self.bucket(t))
        if key not in self.entries:
            raise KeyError(f"no arrival conditions for {airport} at bucket {key[1]}")
        return np.array(self.entries[key], dtype=float)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["airport", "t_bucket", *self.names])
            for (ap, tb) in sorted(self.entries):
                w.writerow([ap, tb, *(repr(float(v)) for v in self.entries[(ap, tb)])])

    @classmethod
    def load(cls, path, bucket_seconds: int = 3600) -> "ArrivalConditionsTable":
        entries = {}
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            names = tuple(header[2:])
            for row in r:
                tb = int(row[1])
                if tb % bucket_seconds:
                    raise ValueError(f"{path}: bucket {tb} is not a multiple of {bucket_seconds}")
                entries[(row[0], tb)] = tuple(float(x) for x in row[2:])
        return cls(bucket_seconds, entries, names)


def enrich(traj: Trajectory, grid: WeatherGrid, arrivals: ArrivalConditionsTable | None = None,
           airport: str = "DEST") -> Trajectory:
    """Replace state features by grid weather; attach arrival conditions as metadata."""
    try:
        feats = grid.lookup(traj.positions, traj.times)
    except GridMissError as err:
        raise GridMissError(err.index, traj.positions[err.index]) from None
    meta = dict(traj.meta)
    if arrivals is not None:
        t_arr = int(traj.times[-1])
        meta["arrival"] = tuple(float(v) for v in arrivals.lookup(airport, t_arr))
        meta["arrival_time"] = t_arr
    return traj.replace(features=feats, feature_names=grid.names, meta=meta)


# --- actions ---------------------------------------------------------------------


def action_array(traj: Trajectory) -> np.ndarray:
    return np.diff(traj.positions, axis=0)


def derive_actions(traj: Trajectory) -> list[tuple[EnrichedState, DeltaAction]]:
    acts = action_array(traj)
    return [(traj.state(i), DeltaAction(*map(float, acts[i]))) for i in range(len(acts))]


# --- normalisation ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def zscore(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def unzscore(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def minmax(self, x):
        return (np.asarray(x, dtype=float) - self.lo) / (self.hi - self.lo)

    def unminmax(self, u):
        return np.asarray(u, dtype=float) * (self.hi - self.lo) + self.lo

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist(),
                "min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormalizationStats":
        return cls(tuple(d["names"]), np.array(d["mean"]), np.array(d["std"]),
                   np.array(d["min"]), np.array(d["max"]))

    def subset(self, idx) -> "NormalizationStats":
        idx = list(idx)
        return NormalizationStats(tuple(self.names[i] for i in idx), self.mean[idx],
                                  self.std[idx], self.lo[idx], self.hi[idx])


def fit_normalization(x, names: Sequence[str] | None = None) -> NormalizationStats:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need a 2-D matrix with at least two rows")
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(x.shape[1]))
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    lo, hi = x.min(axis=0), x.max(axis=0)
    for j, name in enumerate(names):
        if not std[j] > 0 or not hi[j] > lo[j]:
            raise ValueError(f"dimension {name!r} is constant and cannot be normalised")
    return NormalizationStats(names, mean, std, lo, hi)


def apply_normalization(x, stats: NormalizationStats, kind: str = "zscore"):
    if kind == "zscore":
        return stats.zscore(x)
    if kind == "minmax":
        return stats.minmax(x)
    raise ValueError(f"unknown normalisation {kind!r}")


def invert_normalization(x, stats: NormalizationStats, kind: str = "zscore"):
    if kind == "zscore":
        return stats.unzscore(x)
    if kind == "minmax":
        return stats.unminmax(x)
    raise ValueError(f"unknown normalisation {kind!r}")
