import numpy as np
import pytest
from hypothesis import settings

from trajpredict.geo import Trajectory
from trajpredict.preprocess import WEATHER_FEATURES, WeatherGrid

# JIT compilation and shared CPUs make per-example timing meaningless here
settings.register_profile("default", deadline=None)
settings.load_profile("default")


def line_trajectory(ident="A", n=5, start=(0.0, 40.0, 1000.0), step=(0.01, 0.0, 10.0), t0=1000, dt=5,
                    features=None, names=()):
    pos = np.array(start) + np.outer(np.arange(n), step)
    times = t0 + dt * np.arange(n)
    feats = np.zeros((n, 0)) if features is None else np.asarray(features, dtype=float)
    return Trajectory(ident, times, pos, feats, names)


def constant_grid(value=1.0, origin=(-5.0, 35.0, -1000.0, 0.0), cell=(1.0, 1.0, 5000.0, 1e6), shape=(12, 10, 6, 4)):
    vals = np.full((*shape, len(WEATHER_FEATURES)), value, dtype=float)
    return WeatherGrid(origin, cell, vals)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in mod.RESULTS:
            ok, detail = mod.RESULTS[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN  (deselected, or errored before measuring)")
