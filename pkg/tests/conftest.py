import numpy as np
import pytest

from plansafe.datagen import DataConfig, make_sample
from plansafe.scene import AgentState, AgentTrack, Lane, RoadGraph, Scene, generate_scene


def straight_road(length=120.0, lanes=2, width=3.5, limit=10.0, lights=()):
    """Lanes along +x starting at the origin; the route is lane 0."""
    xs = np.linspace(0.0, length, int(length / 2) + 1)
    lane_pts = [np.column_stack([xs, np.full_like(xs, i * width)]) for i in range(lanes)]
    lo, hi = -width / 2, (lanes - 0.5) * width
    drivable = np.array([[0.0, lo], [length, lo], [length, hi], [0.0, hi]])
    return RoadGraph(
        lanes=[Lane(p, limit) for p in lane_pts],
        drivable=[drivable],
        crosswalks=[],
        route=lane_pts[0],
        lights=list(lights),
    )


def make_scene(ego=(10.0, 0.0, 0.0, 8.0), agents=(), road=None, n_hist=10):
    from plansafe.scene import backfill_history

    ego_state = AgentState.of_kind(*ego)
    tracks = []
    for i, a in enumerate(agents):
        st = a if isinstance(a, AgentState) else AgentState.of_kind(*a)
        tracks.append(AgentTrack(f"a{i}", backfill_history(st, n_hist, 0.1), st.kind, st.half_length, st.half_width))
    return Scene(
        ego=AgentTrack("ego", backfill_history(ego_state, n_hist, 0.1)),
        agents=tracks,
        road=road or straight_road(),
        dt=0.1,
        horizon=3.0,
    )


@pytest.fixture
def road():
    return straight_road()


@pytest.fixture(scope="session")
def scene():
    return generate_scene(7)


@pytest.fixture(scope="session")
def samples():
    cfg = DataConfig(p_no_failure=0.2)
    return [make_sample(i, 11, cfg) for i in range(6)]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
