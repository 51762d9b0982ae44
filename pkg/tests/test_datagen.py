import numpy as np
import pytest

from plansafe.datagen import (
    NEARBY_REMOVED,
    NO_AGENTS,
    NO_FAILURE,
    NO_NEARBY,
    DataConfig,
    branch_histogram,
    class_histogram,
    collect,
    inject_failure,
    read_dataset,
    relabel,
    split_by_scene,
    write_dataset,
)
from plansafe.scene import AgentState

from conftest import make_scene


def test_branch_no_agents():
    sc = make_scene()
    perceived, monitored, failure, branch = inject_failure(sc, [30.0, 1.0], 10.0, np.random.default_rng(0))
    assert branch == NO_AGENTS and perceived == sc
    assert len(monitored.agents) == 1 and failure.present
    assert failure.state.y == pytest.approx(0.0)  # snapped onto the nearest lane


def test_branch_no_nearby_duplicates_shifted():
    sc = make_scene(agents=[(80.0, 3.5, 0.0, 5.0)])
    perceived, monitored, failure, branch = inject_failure(sc, [20.0, 0.0], 10.0, np.random.default_rng(0))
    assert branch == NO_NEARBY and perceived == sc and len(monitored.agents) == 2
    assert failure.state.x == pytest.approx(80.0 - 4.6)


def test_branch_nearby_removed():
    sc = make_scene(agents=[(30.0, 0.0, 0.0, 5.0)])
    perceived, monitored, failure, branch = inject_failure(sc, [32.0, 0.0], 10.0, np.random.default_rng(0))
    assert branch == NEARBY_REMOVED and monitored == sc and not perceived.agents
    assert failure.state.x == pytest.approx(30.0)


def test_collect_labels_and_io(tmp_path, samples):
    assert set(branch_histogram(samples)) == {NO_AGENTS, NO_NEARBY, NEARBY_REMOVED, NO_FAILURE}
    assert class_histogram(samples).sum() == 256 * len(samples)
    for s in samples[:3]:
        R, cls = relabel(s)
        assert np.array_equal(R, s.rewards) and np.array_equal(cls, s.classes)
        if s.branch == NO_FAILURE:
            assert not s.failure.present and s.perceived == s.monitored
    path = tmp_path / "d.jsonl"
    meta = write_dataset(samples, path, seed=11)
    assert meta["n_samples"] == len(samples)
    again = read_dataset(path)
    assert len(again) == len(samples)
    for a, b in zip(again, samples):
        assert a.perceived == b.perceived and a.monitored == b.monitored and a.failure == b.failure
        assert np.array_equal(a.classes, b.classes) and np.array_equal(a.rewards, b.rewards)


def test_determinism(tmp_path):
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_dataset(collect(3, 5), p1, seed=5)
    write_dataset(collect(3, 5), p2, seed=5)
    assert p1.read_bytes() == p2.read_bytes()


def test_split_by_scene_disjoint(samples):
    tr, va = split_by_scene(samples, 0.5, 0)
    assert {s.scene_seed for s in tr}.isdisjoint({s.scene_seed for s in va})
    assert len(tr) + len(va) == len(samples)


def test_config_checks():
    with pytest.raises(ValueError):
        DataConfig(p_no_failure=1.5).check()
    with pytest.raises(ValueError):
        collect(0, 1)
