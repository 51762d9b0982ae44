import numpy as np

from plansafe.prediction import associate_lane, constant_velocity, predict_agent, predict_all
from plansafe.scene import AgentTrack, PEDESTRIAN, backfill_history, AgentState

from conftest import make_scene, straight_road


def test_constant_velocity():
    st = constant_velocity([0.0, 0.0, np.pi / 2, 2.0], 30, 0.1)
    assert st.shape == (30, 4)
    assert np.allclose(st[-1, :2], [0.0, 6.0])


def test_lane_keep_follows_lane_at_current_speed():
    road = straight_road()
    track = AgentTrack("a", backfill_history(AgentState.of_kind(20.0, 3.3, 0.2, 6.0), 10, 0.1))
    pred = predict_agent(track, road, 3.0, 0.1)
    assert pred.states.shape == (30, 4)
    assert np.allclose(pred.states[:, 1], 3.5)  # snapped onto lane 1
    assert np.allclose(pred.states[:, 3], 6.0)
    assert np.allclose(np.diff(pred.states[:, 0]), 0.6)


def test_reverse_lane_direction():
    road = straight_road()
    track = AgentTrack("a", backfill_history(AgentState.of_kind(60.0, 0.0, np.pi, 5.0), 10, 0.1))
    pred = predict_agent(track, road, 3.0, 0.1)
    assert pred.states[-1, 0] < 60.0
    assert np.allclose(np.abs(pred.states[:, 2]), np.pi)


def test_pedestrian_and_off_lane_use_constant_velocity():
    road = straight_road()
    ped = AgentState.of_kind(20.0, 1.0, np.pi / 2, 1.2, PEDESTRIAN)
    pred = predict_agent(AgentTrack("p", backfill_history(ped, 10, 0.1), PEDESTRIAN, 0.4, 0.4), road, 3.0, 0.1)
    assert np.allclose(pred.states, constant_velocity(ped.as_row(), 30, 0.1))
    far = AgentState.of_kind(20.0, 40.0, 0.0, 5.0)
    pred = predict_agent(AgentTrack("f", backfill_history(far, 10, 0.1)), road, 3.0, 0.1)
    assert np.allclose(pred.states, constant_velocity(far.as_row(), 30, 0.1))
    assert associate_lane(np.array([20.0, 40.0]), 0.0, road) is None


def test_stationary_agent_stays_put():
    sc = make_scene(agents=[(40.0, 0.0, 0.0, 0.0)])
    (pred,) = predict_all(sc)
    assert np.allclose(pred.states[:, :2], [40.0, 0.0])
