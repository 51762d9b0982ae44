import numpy as np
import pytest

from plansafe.scene import (
    AgentState,
    AgentTrack,
    MonitorInput,
    PEDESTRIAN,
    add_agent,
    agents_near,
    backfill_history,
    dumps_scene,
    generate_scene,
    initial_overlaps,
    loads_scene,
    monitor_from_dict,
    monitor_to_dict,
    remove_agent,
    scene_from_dict,
    scene_to_dict,
    validate_scene,
)

from conftest import make_scene


def test_agent_state_validation():
    with pytest.raises(ValueError):
        AgentState(0, 0, 0, -1.0)
    with pytest.raises(ValueError):
        AgentState(0, 0, 0, 1.0, kind="bicycle")
    with pytest.raises(ValueError):
        AgentState(np.nan, 0, 0, 1.0)
    assert AgentState(0, 0, 2 * np.pi + 0.5, 1.0).theta == pytest.approx(0.5)


def test_track_rejects_bad_shapes():
    with pytest.raises(ValueError):
        AgentTrack("a", np.zeros((3, 3)))
    with pytest.raises(ValueError):
        AgentTrack("a", np.array([[0, 0, 0, -1.0]]))


def test_json_round_trip(scene):
    again = loads_scene(dumps_scene(scene))
    assert again == scene
    assert dumps_scene(again) == dumps_scene(scene)


def test_unknown_scene_key_rejected(scene):
    d = scene_to_dict(scene)
    d["extra"] = 1
    with pytest.raises(ValueError, match="unknown"):
        scene_from_dict(d)


def test_monitor_round_trip():
    m = MonitorInput.of(AgentState.of_kind(1, 2, 0.3, 4, PEDESTRIAN))
    assert monitor_from_dict(monitor_to_dict(m)) == m
    assert not monitor_from_dict(monitor_to_dict(MonitorInput.absent())).present


def test_add_remove_agent():
    sc = make_scene(agents=[(30.0, 0.0, 0.0, 5.0)])
    st = AgentState.of_kind(50.0, 3.5, 0.0, 4.0)
    sc2 = add_agent(sc, st)
    assert len(sc2.agents) == 2 and len(sc2.agents[-1].states) == len(sc.ego.states)
    assert np.allclose(sc2.agents[-1].states[-1], st.as_row())
    sc3 = remove_agent(sc2, sc2.agents[-1].id)
    assert sc3 == sc
    with pytest.raises(KeyError):
        remove_agent(sc, "nope")


def test_backfill_is_constant_velocity():
    h = backfill_history(AgentState.of_kind(10.0, 0.0, 0.0, 5.0), 10, 0.1)
    assert np.allclose(np.diff(h[:, 0]), 0.5) and h[-1, 0] == 10.0


def test_agents_near():
    sc = make_scene(agents=[(30.0, 0.0, 0.0, 5.0), (80.0, 0.0, 0.0, 5.0)])
    assert agents_near(sc, [32.0, 0.0], 10.0) == ["a0"]
    with pytest.raises(ValueError):
        agents_near(sc, [0, 0], 0.0)


def test_generated_scenes_are_valid_and_deterministic():
    for seed in range(10):
        sc = generate_scene(seed)
        validate_scene(sc)
        assert initial_overlaps(sc) == 0
        assert sc.road.drivable_signed_distance(sc.ego.states[-1, :2][None])[0] > 0
    assert dumps_scene(generate_scene(3)) == dumps_scene(generate_scene(3))
    assert dumps_scene(generate_scene(3)) != dumps_scene(generate_scene(4))


def test_validate_scene_history_mismatch():
    sc = make_scene(agents=[(30.0, 0.0, 0.0, 5.0)])
    bad = sc.__class__(sc.ego, [AgentTrack("x", np.zeros((3, 4)))], sc.road)
    with pytest.raises(ValueError, match="history"):
        validate_scene(bad)
