import numpy as np
import pytest

from plansafe.rules import (
    DEFAULT_RULES,
    WEIGHTS,
    SafetyClass,
    agent_futures,
    classify_reward,
    collision_robustness,
    collision_robustness_brute,
    evaluate_plan,
    evaluate_plans,
    hierarchy_reward,
    robustness,
)
from plansafe.scene import TrafficLight
from plansafe.trajectory import Trajectory

from conftest import make_scene, straight_road


def cruise(x0=10.0, y=0.0, v=8.0, n=31, dt=0.1):
    t = dt * np.arange(n)
    return Trajectory(np.column_stack([x0 + v * t, np.full(n, y), np.zeros(n), np.full(n, v)]))


def test_weights_dominate_lower_ranks():
    assert list(WEIGHTS) == [128, 64, 32, 16, 8, 4, 2]
    for i in range(len(WEIGHTS) - 1):
        assert WEIGHTS[i] > WEIGHTS[i + 1 :].sum()


def test_threshold_examples():
    assert classify_reward(254) is SafetyClass.SAFE
    assert classify_reward(200) is SafetyClass.RISKY
    assert classify_reward(100) is SafetyClass.CRITICAL
    assert classify_reward(225) is SafetyClass.RISKY and classify_reward(150) is SafetyClass.RISKY
    assert list(classify_reward([254, 200, 100])) == [0, 1, 2]


def test_hierarchy_reward_all_satisfied():
    R = hierarchy_reward(np.ones(7) * 0.1)
    assert 254 <= R <= 255
    with pytest.raises(ValueError):
        hierarchy_reward(np.array([np.nan] + [1.0] * 6))


def test_clean_cruise_is_safe():
    hr = evaluate_plan(cruise(), make_scene())
    assert hr.cls is SafetyClass.SAFE and hr.reward > 254


def test_collision_alone_is_critical():
    sc = make_scene(agents=[(30.0, 0.0, 0.0, 0.0)])
    rho = robustness(cruise(), sc)
    assert rho[0] < 0 and np.all(rho[1:4] >= 0)
    assert evaluate_plan(cruise(), sc).cls is SafetyClass.CRITICAL


def test_offroad_is_risky():
    hr = evaluate_plan(cruise(y=-3.0), make_scene())
    assert hr.cls is SafetyClass.RISKY


def test_red_light_violation():
    road = straight_road(lights=[TrafficLight(np.array([25.0, 0.0]), "red")])
    sc = make_scene(road=road)
    rho = robustness(cruise(), sc)
    assert rho[2] < 0
    green = make_scene(road=straight_road(lights=[TrafficLight(np.array([25.0, 0.0]), "green")]))
    assert robustness(cruise(), green)[2] >= 0


def test_speed_limit_and_progress():
    sc = make_scene(ego=(10.0, 0.0, 0.0, 12.0))
    rho = robustness(cruise(v=12.0), sc)
    assert rho[3] == pytest.approx(-2.0)
    still = robustness(cruise(v=0.0), make_scene(ego=(10.0, 0.0, 0.0, 0.0)))
    assert still[4] < 0


def test_pruned_collision_matches_brute_force():
    rng = np.random.default_rng(0)
    sc = make_scene(agents=[(25.0, 0.0, 0.0, 2.0), (40.0, 3.5, np.pi, 6.0), (15.0, -1.0, 1.0, 0.0)])
    fut, dims = agent_futures(sc)
    plans = np.stack([cruise(v=v, y=y).states for v, y in rng.uniform([0, -2], [12, 4], (40, 2))])
    a = collision_robustness(plans, (2.3, 1.0), fut, dims, 0.5, 100.0)
    b = collision_robustness_brute(plans, (2.3, 1.0), fut, dims, 0.5, 100.0)
    assert np.max(np.abs(a - b)) <= 1e-9


def test_batch_matches_single(scene):
    from plansafe.planner import build_tree

    tree = build_tree(scene.ego.last, scene.road)
    R, cls = evaluate_plans(tree.states()[:5], scene)
    for i in range(5):
        hr = evaluate_plan(tree.leaves[i], scene)
        assert hr.reward == pytest.approx(R[i]) and int(hr.cls) == cls[i]


def test_horizon_mismatch():
    with pytest.raises(ValueError):
        robustness(cruise(n=20), make_scene())
