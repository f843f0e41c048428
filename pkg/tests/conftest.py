import math

import numpy as np
import pytest

from racegame.dynamics import VehicleParams
from racegame.game import GameConfig, RaceEnv
from racegame.track import build_track, default_track_path, load_track


def ring_samples(R=20.0, n=360, w=6.0):
    a = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    return [(R * math.cos(t), R * math.sin(t), w) for t in a]


def straight_samples(n=100, spacing=1.0, w=6.0):
    return [(spacing * i, 0.0, w) for i in range(n)]


def s_samples(n=200, w=6.0):
    # two opposite arcs of radius 30 joined smoothly
    t = np.linspace(0.0, 1.0, n)
    x = 100.0 * t
    y = 15.0 * np.sin(2.0 * math.pi * t)
    return [(float(a), float(b), w) for a, b in zip(x, y)]


@pytest.fixture(scope="session")
def ring():
    return build_track(ring_samples(), closed=True)


@pytest.fixture(scope="session")
def straight():
    return build_track(straight_samples(), closed=False)


@pytest.fixture(scope="session")
def s_track():
    return build_track(s_samples(), closed=False)


@pytest.fixture(scope="session")
def track():
    return load_track(default_track_path(), closed=True)


@pytest.fixture(scope="session")
def env(track):
    return RaceEnv(track, VehicleParams(), GameConfig(T=40))


# verdict lines from the acceptance suite, shown in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
