import numpy as np
import pytest

from plansafe.planner import DEFAULT_TREE, build_tree, rh_plan
from plansafe.rules import evaluate_plans
from plansafe.trajectory import validate_trajectory

from conftest import make_scene


@pytest.fixture(scope="module")
def tree(scene):
    return build_tree(scene.ego.last, scene.road)


def test_tree_shape(tree, scene):
    assert len(tree) == 256
    st = tree.states()
    assert st.shape == (256, 31, 4)
    assert np.allclose(st[:, 0], scene.ego.states[-1])
    assert len(set(tree.labels)) == 256


def test_leaves_share_first_stage(tree):
    st = tree.states()
    n = 16
    for k in range(16):
        block = st[k * n : (k + 1) * n, :16]
        assert np.allclose(block, block[0])


def test_leaves_are_dynamically_feasible(tree):
    for leaf in tree.leaves[::17]:
        validate_trajectory(leaf)


def test_tree_deterministic(scene, tree):
    again = build_tree(scene.ego.last, scene.road)
    assert np.array_equal(again.states(), tree.states())


def test_rh_plan_picks_best():
    sc = make_scene(agents=[(35.0, 0.0, 0.0, 0.0)])
    best, tree, R = rh_plan(sc)
    assert R.shape == (256,)
    i = int(np.argmax(R))
    assert best is tree.leaves[i]
    _, cls = evaluate_plans(best, sc)
    assert cls[0] != 2  # a stationary obstacle in lane is avoidable


def test_tree_config_primitives():
    assert len(DEFAULT_TREE.primitives) == 16
