import numpy as np
import pytest

from plansafe.reachability import (
    FRTConfig,
    FRTFamily,
    GameConfig,
    Grid,
    Unicycle3D,
    ValueGrid,
    classify_plan_frt,
    classify_plan_game,
    interpolate,
    load_frt_family,
    load_value_grid,
    max_stable_dt,
    query,
    save_family,
    save_value_grid,
    solve_brt_game,
    solve_frt,
    solve_game_family,
    state_grid,
)
from plansafe.scene import AgentState, MonitorInput

SMALL_FRT = FRTConfig(n_xy_3d=41, n_theta_3d=21, n_xy_4d=25, n_theta_4d=13, n_v_4d=7)
SMALL_GAME = GameConfig(extent=60.0, n_xy=41, n_theta=21, speeds=(0.0, 7.5, 15.0))


@pytest.fixture(scope="module")
def frt3():
    return solve_frt(5.0, "3d", 1.0, SMALL_FRT, grid=state_grid("3d", 25, 41, 21))


@pytest.fixture(scope="module")
def game():
    return solve_game_family(SMALL_GAME)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid((0,), (1,), (2,), (False,))
    with pytest.raises(ValueError):
        Grid((0, 0), (1,), (3, 3), (False, False))
    g = state_grid("3d", 25, 41, 20)
    assert g.spacing[2] == pytest.approx(2 * np.pi / 20)
    assert np.allclose(g.axis(0)[[0, -1]], [-25, 25])


def test_interpolation_reproduces_linear_fields():
    g = Grid((-1, -2), (3, 2), (9, 11), (False, False))
    xs = g.mesh()
    V = np.broadcast_to(2 * xs[0] - xs[1] + 0.5, g.shape)
    pts = np.random.default_rng(0).uniform([-1, -2], [3, 2], (50, 2))
    assert np.allclose(interpolate(g, V, pts), 2 * pts[:, 0] - pts[:, 1] + 0.5)


def test_periodic_interpolation_wraps():
    g = Grid((-np.pi,), (np.pi,), (8,), (True,))
    V = np.cos(g.axis(0))
    assert interpolate(g, V, np.array([[np.pi - 1e-9]])) == pytest.approx(interpolate(g, V, np.array([[-np.pi]])), abs=1e-6)


def test_frt_seed_and_monotone(frt3):
    assert query(frt3, 0.0, [0.0, 0.0, 0.0]) < 0
    assert query(frt3, 0.0, [10.0, 0.0, 0.0]) > 0
    assert np.all(np.diff(frt3.values, axis=0) <= 1e-12)
    assert query(frt3, 1.0, [5.0, 0.0, 0.0]) < 0  # straight ahead at v T
    assert query(frt3, 1.0, [-10.0, 0.0, 0.0]) > 0  # cannot go backwards


def test_cfl_violation_names_max_dt():
    g = Grid((-25, -25, -np.pi), (25, 25, np.pi), (21, 21, 11), (False, False, True), dt_pde=10.0)
    dmax = max_stable_dt(Unicycle3D(5.0), g)
    with pytest.raises(ValueError, match=f"{dmax:.6g}"):
        solve_frt(5.0, "3d", 1.0, SMALL_FRT, grid=g)


def test_frt_input_checks():
    with pytest.raises(ValueError):
        solve_frt(5.0, "3d", 4.0)
    with pytest.raises(ValueError):
        solve_frt(20.0, "3d", 1.0)
    with pytest.raises(ValueError):
        solve_frt(5.0, "5d", 1.0)


def test_value_grid_round_trip(tmp_path, frt3):
    p = tmp_path / "v.vgrd"
    save_value_grid(frt3, p)
    again = load_value_grid(p)
    assert again.grid == frt3.grid and np.allclose(again.times, frt3.times)
    assert np.allclose(again.values, frt3.values.astype(np.float32))
    assert again.meta == frt3.meta
    raw = p.read_bytes()
    (tmp_path / "bad.vgrd").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_value_grid(tmp_path / "bad.vgrd")
    (tmp_path / "short.vgrd").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_value_grid(tmp_path / "short.vgrd")


def test_value_grid_shape_check(frt3):
    with pytest.raises(ValueError):
        ValueGrid(frt3.grid, frt3.times, frt3.values[:, :3])


def test_frt_classifier(tmp_path, frt3):
    fam = FRTFamily("3d", (5.0,), (frt3,))
    agent = AgentState.of_kind(20.0, 0.0, np.pi, 5.0)
    t = 0.1 * np.arange(11)
    toward = np.column_stack([10 + 5 * t, 0 * t, 0 * t, 5 + 0 * t])
    away = np.column_stack([-10 - 5 * t, 40 + 0 * t, np.pi + 0 * t, 5 + 0 * t])
    out = classify_plan_frt(np.stack([toward, away]), fam, MonitorInput.of(agent))
    assert list(out) == [2, 0]
    assert list(classify_plan_frt(np.stack([toward, away]), fam, MonitorInput.absent())) == [0, 0]
    save_family(fam, tmp_path, "frt3d")
    assert load_frt_family(tmp_path, "frt3d").speeds == (5.0,)
    with pytest.raises(FileNotFoundError):
        load_frt_family(tmp_path, "frt4d")


def test_game_brt_oracles():
    vg = solve_brt_game(7.5, 7.5, 3.0, SMALL_GAME)
    for t in vg.times:
        pts = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 1.0], [0.0, -2.5, 3.0]])
        assert np.all(query(vg, t, pts) <= 0)
    assert query(vg, 3.0, [20.0, 0.0, np.pi]) < 0  # closing at 15 m/s, coarse grid
    assert query(vg, 3.0, [55.0, 0.0, 0.0]) > 0


def test_game_classifier(game):
    agent = AgentState.of_kind(30.0, 0.0, np.pi, 7.5)
    t = 0.1 * np.arange(31)
    head_on = np.column_stack([7.5 * t, 0 * t, 0 * t, 7.5 + 0 * t])
    away = np.column_stack([-7.5 * t, 30 + 0 * t, np.pi + 0 * t, 7.5 + 0 * t])
    assert list(classify_plan_game(np.stack([head_on, away]), game, MonitorInput.of(agent))) == [2, 0]
