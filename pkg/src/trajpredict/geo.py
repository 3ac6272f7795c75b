"""Trajectory domain types, the position-increment action space and local metric frames."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS = 6371000.0
DEG = math.pi / 180.0

LON_RANGE = (-180.0, 180.0)
LAT_RANGE = (-90.0, 90.0)
ALT_RANGE = (-500.0, 20000.0)


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPosition:
    lon: float
    lat: float
    alt: float

    def __post_init__(self):
        if not (LON_RANGE[0] <= self.lon <= LON_RANGE[1]):
            raise ValueError(f"longitude out of range: {self.lon}")
        if not (LAT_RANGE[0] <= self.lat <= LAT_RANGE[1]):
            raise ValueError(f"latitude out of range: {self.lat}")
        if not (ALT_RANGE[0] <= self.alt <= ALT_RANGE[1]):
            raise ValueError(f"altitude out of range: {self.alt}")

    def as_array(self) -> np.ndarray:
        return np.array([self.lon, self.lat, self.alt], dtype=float)

    @classmethod
    def from_array(cls, a) -> "GeoPosition":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    @classmethod
    def unchecked(cls, lon: float, lat: float, alt: float) -> "GeoPosition":
        """Build without range validation (rollout positions may leave the valid box)."""
        out = object.__new__(cls)
        object.__setattr__(out, "lon", lon)
        object.__setattr__(out, "lat", lat)
        object.__setattr__(out, "alt", alt)
        return out


@dataclass(frozen=True)
class RawState:
    position: GeoPosition
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")


@dataclass(frozen=True)
class EnrichedState:
    position: GeoPosition
    timestamp: int
    features: tuple[float, ...] = ()

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")
        if not all(math.isfinite(v) for v in self.features):
            raise ValueError("features must be finite")


@dataclass(frozen=True)
class DeltaAction:
    dlon: float
    dlat: float
    dalt: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dlon, self.dlat, self.dalt], dtype=float)

    def inverse(self) -> "DeltaAction":
        return DeltaAction(-self.dlon, -self.dlat, -self.dalt)


@dataclass(frozen=True)
class EnuVector:
    east: float
    north: float
    up: float

    def as_array(self) -> np.ndarray:
        return np.array([self.east, self.north, self.up], dtype=float)


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One flight as parallel arrays.

    ``positions`` is (n, 3) holding lon, lat, alt; ``times`` holds integer
    epoch seconds; ``features`` is (n, k) with names in ``feature_names``.
    ``meta`` carries trajectory-level data (arrival conditions, mode labels).
    """

    id: str
    times: np.ndarray
    positions: np.ndarray
    features: np.ndarray
    feature_names: tuple[str, ...] = ()
    origin: GeoPosition | None = None
    destination: GeoPosition | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = _frozen(self.times, np.int64)
        positions = _frozen(self.positions).reshape(len(times), 3)
        features = _frozen(self.features).reshape(len(times), -1)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if len(times) < 2:
            raise TrajectoryError(f"trajectory {self.id!r} needs at least 2 states")
        if np.any(np.diff(times) <= 0):
            raise TrajectoryError(f"trajectory {self.id!r} timestamps not strictly increasing")
        if features.shape[1] != len(self.feature_names):
            raise TrajectoryError(
                f"trajectory {self.id!r}: {features.shape[1]} feature columns, "
                f"{len(self.feature_names)} names"
            )
        if not np.all(np.isfinite(positions)) or not np.all(np.isfinite(features)):
            raise TrajectoryError(f"trajectory {self.id!r} has non-finite values")
        # end points default to the track itself; predicted tracks may end out of range
        if self.origin is None:
            object.__setattr__(self, "origin", GeoPosition.unchecked(*map(float, positions[0])))
        if self.destination is None:
            object.__setattr__(self, "destination", GeoPosition.unchecked(*map(float, positions[-1])))

    def __len__(self):
        return len(self.times)

    @property
    def duration(self) -> int:
        return int(self.times[-1] - self.times[0])

    @property
    def states(self) -> list[EnrichedState]:
        return [self.state(i) for i in range(len(self))]

    def state(self, i: int) -> EnrichedState:
        return EnrichedState(
            GeoPosition.from_array(self.positions[i]),
            int(self.times[i]),
            tuple(float(v) for v in self.features[i]),
        )

    def replace(self, **changes) -> "Trajectory":
        kw = dict(
            id=self.id, times=self.times, positions=self.positions, features=self.features,
            feature_names=self.feature_names, origin=self.origin, destination=self.destination,
            meta=dict(self.meta),
        )
        kw.update(changes)
        return Trajectory(**kw)

    def tail(self, start: int) -> "Trajectory":
        """Sub-trajectory from state ``start`` to the end."""
        return self.replace(
            times=self.times[start:], positions=self.positions[start:], features=self.features[start:]
        )


def apply_action(s: EnrichedState, a: DeltaAction) -> GeoPosition:
    """Next position under the deterministic additive transition. No clamping."""
    p = s.position
    return GeoPosition.unchecked(p.lon + a.dlon, p.lat + a.dlat, p.alt + a.dalt)


def eta(traj_len: int, dt: float) -> float:
    if traj_len < 0 or dt <= 0:
        raise ValueError("eta needs traj_len >= 0 and dt > 0")
    return dt * traj_len


def enu_array(ref, pts) -> np.ndarray:
    """Vectorised equirectangular ENU offsets of ``pts`` (..., 3) from ``ref`` (3,)."""
    ref = np.asarray(ref, dtype=float)
    pts = np.asarray(pts, dtype=float)
    k = EARTH_RADIUS * DEG
    east = (pts[..., 0] - ref[0]) * math.cos(ref[1] * DEG) * k
    north = (pts[..., 1] - ref[1]) * k
    up = pts[..., 2] - ref[2]
    return np.stack([east, north, up], axis=-1)


def to_enu(ref: GeoPosition, p: GeoPosition) -> EnuVector:
    e, n, u = enu_array(ref.as_array(), p.as_array())
    return EnuVector(float(e), float(n), float(u))


def distance_3d(ref: GeoPosition, a: GeoPosition, b: GeoPosition) -> float:
    d = enu_array(ref.as_array(), a.as_array()) - enu_array(ref.as_array(), b.as_array())
    return float(np.linalg.norm(d))


def horizontal_distance(ref, a, b) -> np.ndarray:
    """Horizontal ENU distance, vectorised over leading axes of ``a``/``b``."""
    d = enu_array(ref, a) - enu_array(ref, b)
    return np.hypot(d[..., 0], d[..., 1])


def action_bounds(v_max: float, dt: float, lat: float) -> np.ndarray:
    """Per-axis feasibility bound (dlon deg, dlat deg, dalt m) for one step at ``lat``."""
    reach = v_max * dt
    k = EARTH_RADIUS * DEG
    return np.array([reach / (k * math.cos(lat * DEG)), reach / k, reach])


# --- CSV -----------------------------------------------------------------

BASE_COLUMNS = ("traj_id", "t", "lon", "lat", "alt")


def write_trajectories_csv(path, trajectories: Sequence[Trajectory]) -> None:
    trajectories = list(trajectories)
    names = trajectories[0].feature_names if trajectories else ()
    for tr in trajectories:
        if tr.feature_names != names:
            raise TrajectoryError("all trajectories in one file must share the feature schema")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BASE_COLUMNS + names)
        for tr in trajectories:
            for i in range(len(tr)):
                lon, lat, alt = tr.positions[i]
                row = [tr.id, int(tr.times[i]), f"{lon:.8f}", f"{lat:.8f}", f"{alt:.3f}"]
                row += [repr(float(v)) for v in tr.features[i]]
                w.writerow(row)


def read_trajectories_csv(path) -> list[Trajectory]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header[:5]) != BASE_COLUMNS:
            raise TrajectoryError(f"{path}: header must start with {','.join(BASE_COLUMNS)}")
        names = tuple(header[5:])
        groups: dict[str, list[list[str]]] = {}
        order: list[str] = []
        last = None
        for row in r:
            if not row:
                continue
            tid = row[0]
            if tid != last and tid in groups:
                raise TrajectoryError(f"{path}: rows of trajectory {tid!r} are not contiguous")
            if tid not in groups:
                groups[tid] = []
                order.append(tid)
            groups[tid].append(row)
            last = tid
    out = []
    for tid in order:
        rows = groups[tid]
        times = np.array([int(x[1]) for x in rows], dtype=np.int64)
        pos = np.array([[float(x[2]), float(x[3]), float(x[4])] for x in rows])
        feats = np.array([[float(v) for v in x[5:]] for x in rows]).reshape(len(rows), len(names))
        out.append(Trajectory(tid, times, pos, feats, names))
    return out


def stack_positions(trajs: Iterable[Trajectory]) -> np.ndarray:
    return np.concatenate([t.positions for t in trajs], axis=0)
