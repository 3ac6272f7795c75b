import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajpredict.geo import (
    DeltaAction,
    EnrichedState,
    GeoPosition,
    Trajectory,
    TrajectoryError,
    action_bounds,
    apply_action,
    distance_3d,
    eta,
    horizontal_distance,
    read_trajectories_csv,
    to_enu,
    write_trajectories_csv,
)

from conftest import line_trajectory


def haversine(lon1, lat1, lon2, lat2, r=6371000.0):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * r * math.asin(math.sqrt(h))


lons = st.floats(-3.0, 3.0)
lats = st.floats(39.0, 42.0)
alts = st.floats(0.0, 12000.0)


@pytest.mark.parametrize("bad", [(181.0, 0.0, 0.0), (0.0, -91.0, 0.0), (0.0, 0.0, -600.0), (0.0, 0.0, 20001.0)])
def test_geoposition_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        GeoPosition(*bad)


def test_apply_action_examples():
    s = EnrichedState(GeoPosition(2.0, 41.0, 1000.0), 0)
    assert apply_action(s, DeltaAction(0, 0, 0)) == GeoPosition(2.0, 41.0, 1000.0)
    p = apply_action(s, DeltaAction(-0.01, 0.005, 50))
    assert (p.lon, p.lat, p.alt) == (2.0 + -0.01, 41.0 + 0.005, 1050.0)
    assert p.lon == pytest.approx(1.99) and p.lat == pytest.approx(41.005)


@given(lons, lats, alts, st.floats(-0.05, 0.05), st.floats(-0.05, 0.05), st.floats(-200, 200))
def test_action_inverse_and_recovery(lon, lat, alt, dlon, dlat, dalt):
    s = EnrichedState(GeoPosition(lon, lat, alt), 0)
    a = DeltaAction(dlon, dlat, dalt)
    nxt = apply_action(s, a)
    # the forward result is exactly the float sum
    assert (nxt.lon, nxt.lat, nxt.alt) == (lon + dlon, lat + dlat, alt + dalt)
    back = apply_action(EnrichedState(nxt, 0), a.inverse())
    assert back.lon == pytest.approx(lon, abs=1e-12)
    assert back.lat == pytest.approx(lat, abs=1e-12)
    assert back.alt == pytest.approx(alt, abs=1e-9)


@pytest.mark.parametrize("n,dt,expected", [(0, 5, 0), (1000, 5, 5000), (360, 5, 1800)])
def test_eta(n, dt, expected):
    assert eta(n, dt) == expected


def test_eta_rejects_bad_input():
    with pytest.raises(ValueError):
        eta(-1, 5)
    with pytest.raises(ValueError):
        eta(3, 0)


def test_enu_examples():
    x = GeoPosition(1.0, 40.0, 500.0)
    assert to_enu(x, x).as_array().tolist() == [0.0, 0.0, 0.0]
    north = to_enu(GeoPosition(0, 0, 0), GeoPosition(0, 1, 0)).north
    assert north == pytest.approx(6371000.0 * math.pi / 180.0, abs=1e-6)
    assert north == pytest.approx(111194.9, abs=1.0)
    east_eq = to_enu(GeoPosition(0, 0, 0), GeoPosition(1, 0, 0)).east
    east_60 = to_enu(GeoPosition(0, 60, 0), GeoPosition(1, 60, 0)).east
    assert east_60 == pytest.approx(0.5 * east_eq, rel=1e-3)
    assert to_enu(x, GeoPosition(1.0, 40.0, 600.0)).up == 100.0


@settings(max_examples=200)
@given(lons, lats, st.floats(-0.6, 0.6), st.floats(-0.6, 0.6))
def test_distance_matches_haversine(lon, lat, dlon, dlat):
    a = GeoPosition(lon, lat, 0.0)
    b = GeoPosition(lon + dlon, lat + dlat, 0.0)
    hv = haversine(a.lon, a.lat, b.lon, b.lat)
    if hv < 100.0:
        return
    d = distance_3d(a, a, b)
    assert d == pytest.approx(hv, rel=0.01)


@given(*(st.tuples(lons, lats, alts) for _ in range(4)))
def test_distance_is_a_metric(r, a, b, c):
    # positions within a few hundred km of the reference
    ref, a, b, c = (GeoPosition(*p) for p in (r, a, b, c))
    dab, dba = distance_3d(ref, a, b), distance_3d(ref, b, a)
    assert dab == dba >= 0
    assert distance_3d(ref, a, a) == 0
    assert distance_3d(ref, a, c) <= dab + distance_3d(ref, b, c) + 1e-6


def test_horizontal_distance_ignores_altitude():
    ref = np.array([0.0, 40.0, 0.0])
    assert horizontal_distance(ref, np.array([0.1, 40.0, 0.0]), np.array([0.1, 40.0, 9000.0])) == 0.0


def test_action_bounds_match_reach():
    b = action_bounds(350.0, 5.0, 60.0)
    k = 6371000.0 * math.pi / 180
    assert b[2] == 1750.0
    assert b[1] * k == pytest.approx(1750.0)
    assert b[0] * k * 0.5 == pytest.approx(1750.0)


def test_trajectory_validation():
    with pytest.raises(TrajectoryError):
        Trajectory("x", [0], [[0, 0, 0]], np.zeros((1, 0)))
    with pytest.raises(TrajectoryError):
        Trajectory("x", [0, 0], [[0, 0, 0], [0, 0, 1]], np.zeros((2, 0)))
    with pytest.raises(TrajectoryError):
        Trajectory("x", [0, 5], [[0, 0, 0], [0, 0, 1]], np.zeros((2, 1)), ())
    t = line_trajectory(n=4)
    assert len(t) == 4 and t.duration == 15
    assert t.origin == GeoPosition.from_array(t.positions[0])
    assert t.tail(2).positions.tolist() == t.positions[2:].tolist()


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 3), st.integers(1, 3))
def test_csv_round_trip(tmp_path_factory, n, k, ntraj):
    rng = np.random.default_rng(n * 100 + k * 10 + ntraj)
    names = tuple(f"f{i}" for i in range(k))
    trajs = []
    for j in range(ntraj):
        pos = np.column_stack([rng.uniform(-3, 3, n), rng.uniform(39, 42, n), rng.uniform(0, 9000, n)])
        trajs.append(Trajectory(f"T{j}", 100 + 5 * np.arange(n), pos, rng.normal(size=(n, k)), names))
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    write_trajectories_csv(path, trajs)
    back = read_trajectories_csv(path)
    assert [t.id for t in back] == [t.id for t in trajs]
    for a, b in zip(trajs, back):
        assert np.array_equal(a.times, b.times)
        assert np.allclose(a.positions[:, :2], b.positions[:, :2], atol=1e-8)
        assert np.allclose(a.positions[:, 2], b.positions[:, 2], atol=1e-3)
        assert np.array_equal(a.features, b.features)
        assert a.feature_names == b.feature_names


def test_csv_rejects_interleaved_rows(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("traj_id,t,lon,lat,alt\nA,0,0,40,0\nB,0,0,40,0\nA,5,0,40,0\n")
    with pytest.raises(TrajectoryError):
        read_trajectories_csv(p)
