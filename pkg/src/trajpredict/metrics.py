"""Prediction accuracy: DTW point matching, RMSE, along/cross-track and vertical errors, ETA error."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .clustering import dtw_arrays
from .geo import GeoPosition, Trajectory, enu_array, eta


class MetricsError(ValueError):
    pass


@dataclass
class MetricsRecord:
    rmse_lon: float
    rmse_lat: float
    rmse_alt: float
    rmse_3d: float
    ate: float
    cte: float
    v: float
    eta_error: float
    setting: str = ""
    m: float = 0.0
    seed: int = 0
    traj_id: str = ""
    repetition: int = 0
    reason: str = ""

    METRICS = ("rmse_lon", "rmse_lat", "rmse_alt", "rmse_3d", "ate", "cte", "v", "eta_error")


def _positions(t) -> np.ndarray:
    return t.positions if isinstance(t, Trajectory) else np.asarray(t, dtype=float)


def match_points(pred, actual) -> np.ndarray:
    """For every predicted point, the index of its DTW-matched actual point.

    Alignment runs on the 3-D positions min-max scaled over both tracks; a
    predicted index paired with several actual points takes the first one.
    """
    p, a = _positions(pred), _positions(actual)
    if len(p) == 0 or len(a) == 0:
        raise MetricsError("matching needs non-empty trajectories")
    both = np.vstack([p, a])
    lo, span = both.min(axis=0), np.ptp(both, axis=0)
    span[span == 0] = 1.0
    _, path = dtw_arrays((p - lo) / span, (a - lo) / span)
    match = np.full(len(p), -1, dtype=np.int64)
    for i, j in path:
        if match[i] < 0:
            match[i] = j
    return match


def matched_errors(pred, actual, matching, ref: GeoPosition) -> np.ndarray:
    """ENU error vectors actual[match[i]] - pred[i], shape (n, 3)."""
    ref = ref.as_array()
    p, a = _positions(pred), _positions(actual)
    return enu_array(ref, a[np.asarray(matching)]) - enu_array(ref, p)


def rmse(pred, actual, matching, ref: GeoPosition):
    """Per-axis (east, north, up) RMSE and 3-D RMSE in metres."""
    e = matched_errors(pred, actual, matching, ref)
    per_axis = np.sqrt(np.mean(e**2, axis=0))
    return per_axis, float(np.sqrt(np.mean(np.sum(e**2, axis=1))))


def course_vectors(pred, ref: GeoPosition) -> np.ndarray:
    """Unit horizontal course at every predicted point.

    Point ``i`` uses the leg to ``i + 1``; the last point reuses the previous
    course; degenerate (zero-length) legs reuse the last valid course, with
    leading degenerate legs taking the first valid one.
    """
    enu = enu_array(ref.as_array(), _positions(pred))
    if len(enu) < 2:
        raise MetricsError("course needs at least two predicted points")
    legs = np.diff(enu[:, :2], axis=0)
    norms = np.hypot(legs[:, 0], legs[:, 1])
    valid = norms > 0
    if not valid.any():
        raise MetricsError("predicted trajectory has no horizontal motion")
    unit = np.zeros_like(legs)
    unit[valid] = legs[valid] / norms[valid, None]
    last = unit[np.flatnonzero(valid)[0]]
    for k in range(len(unit)):
        if valid[k]:
            last = unit[k]
        else:
            unit[k] = last
    return np.vstack([unit, unit[-1:]])


def track_components(pred, actual, matching, ref: GeoPosition):
    """Per-pair along-track, cross-track (positive left of course) and vertical errors."""
    e = matched_errors(pred, actual, matching, ref)
    c = course_vectors(pred, ref)
    left = np.column_stack([-c[:, 1], c[:, 0]])
    ate = np.sum(e[:, :2] * c, axis=1)
    cte = np.sum(e[:, :2] * left, axis=1)
    return ate, cte, e[:, 2]


def track_errors(pred, actual, matching, ref: GeoPosition) -> tuple[float, float, float]:
    ate, cte, v = track_components(pred, actual, matching, ref)
    return float(ate.mean()), float(cte.mean()), float(v.mean())


def eta_error(pred: Trajectory, actual: Trajectory, dt: float) -> float:
    """|dt * |T_pred| - actual duration|, counting predicted points after the start state."""
    return abs(eta(len(pred) - 1, dt) - (int(actual.times[-1]) - int(actual.times[0])))


def evaluate(pred: Trajectory, actual: Trajectory, ref: GeoPosition, dt: float, **meta) -> MetricsRecord:
    match = match_points(pred, actual)
    axes, r3 = rmse(pred, actual, match, ref)
    ate, cte, v = track_errors(pred, actual, match, ref)
    return MetricsRecord(float(axes[0]), float(axes[1]), float(axes[2]), r3, ate, cte, v,
                         float(eta_error(pred, actual, dt)), **meta)


# --- aggregation ---------------------------------------------------------------------


PERCENTILES = (25, 50, 75, 100)


def nearest_rank(values, p: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        raise MetricsError("no values")
    rank = max(1, int(math.ceil(p / 100.0 * len(v))))
    return float(v[rank - 1])


def aggregate(records: Sequence[MetricsRecord], metrics=MetricsRecord.METRICS) -> dict:
    """Mean, median and nearest-rank percentiles per metric."""
    if not records:
        raise MetricsError("nothing to aggregate")
    out = {}
    for name in metrics:
        vals = [getattr(r, name) for r in records]
        row = {"mean": float(np.mean(vals)), "median": nearest_rank(vals, 50)}
        for p in PERCENTILES:
            row[f"p{p}"] = nearest_rank(vals, p)
        out[name] = row
    return out


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_records_csv(records: Sequence[MetricsRecord], path) -> None:
    names = [f.name for f in fields(MetricsRecord)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in records:
            d = asdict(r)
            w.writerow([_fmt(d[n]) for n in names])


def read_records_csv(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for f in fields(MetricsRecord):
                raw = row[f.name]
                kw[f.name] = int(raw) if f.type in ("int", int) else float(raw) if f.type in ("float", float) else raw
            out.append(MetricsRecord(**kw))
    return out


def write_summary_csv(groups: dict, path) -> None:
    """``groups`` maps (setting, M) to an ``aggregate`` result."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "m", "metric", "n", "mean", "median", *(f"p{p}" for p in PERCENTILES)])
        for (setting, m), (n, agg) in sorted(groups.items()):
            for metric, row in agg.items():
                w.writerow([setting, _fmt(m), metric, n, _fmt(row["mean"]), _fmt(row["median"]),
                            *(_fmt(row[f"p{p}"]) for p in PERCENTILES)])
