import numpy as np
import pytest

from plansafe.scene import AgentState
from plansafe.trajectory import ControlInput, Trajectory, rk4, step, unicycle, validate_trajectory


def test_step_clamps_speed_and_wraps():
    s = step(AgentState.of_kind(0, 0, np.pi - 0.01, 14.9), ControlInput(0.6, 3.0), 1.0)
    assert s.v == 15.0 and -np.pi <= s.theta < np.pi
    with pytest.raises(ValueError):
        step(AgentState.of_kind(0, 0, 0, 1), ControlInput(1.0, 0.0), 0.1)


def test_rk4_straight_line_exact():
    out = rk4(np.array([0.0, 0.0, 0.0, 2.0]), 0.0, 1.0, 1.0)
    assert np.allclose(out, [2.5, 0.0, 0.0, 3.0])


def test_rk4_vectorized():
    rng = np.random.default_rng(0)
    s = rng.uniform(0, 5, (7, 4))
    om, a = rng.uniform(-0.6, 0.6, 7), rng.uniform(-4, 3, 7)
    batch = rk4(s, om, a, 0.1)
    for i in range(7):
        assert np.allclose(batch[i], rk4(s[i], om[i], a[i], 0.1))
    assert unicycle(s, om, a).shape == (7, 4)


def test_trajectory_rows_round_trip():
    st = np.column_stack([np.arange(31) * 0.5, np.zeros(31), np.zeros(31), np.full(31, 5.0)])
    tr = Trajectory(st)
    again = Trajectory.from_rows(tr.to_rows())
    assert again == tr and again.horizon == pytest.approx(3.0)
    with pytest.raises(ValueError):
        Trajectory.from_rows([[0, 1, 2, 3]])
    with pytest.raises(ValueError):
        Trajectory(np.zeros((1, 4)))


def test_validate_trajectory():
    s = np.array([0.0, 0.0, 0.0, 5.0])
    rows = [s]
    for _ in range(30):
        rows.append(rk4(rows[-1], 0.3, 1.0, 0.1))
    validate_trajectory(Trajectory(np.array(rows)))
    jump = np.array(rows)
    jump[10:, 1] += 2.0
    with pytest.raises(ValueError):
        validate_trajectory(Trajectory(jump))
    fast = np.array(rows)
    fast[:, 3] = np.linspace(5, 30, 31)
    with pytest.raises(ValueError):
        validate_trajectory(Trajectory(fast))
