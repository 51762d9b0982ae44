import numpy as np
import pytest

from plansafe import qmonitor as Q
from plansafe.scene import MonitorInput

from helpers import gradient_check, perturbed_params, random_batch

SMALL = Q.ModelConfig(d_model=8, heads=2)


@pytest.fixture(scope="module")
def encoded(samples):
    return [Q.encode_sample(s, SMALL) for s in samples]


@pytest.fixture(scope="module")
def model():
    return Q.QMonitor.initialize(SMALL, seed=3)


def test_config_check():
    with pytest.raises(ValueError):
        Q.ModelConfig(d_model=10, heads=4).check()


def test_encoding_shapes(samples, encoded):
    e = encoded[0]
    assert e.plans.shape == (256, 16, Q.PLAN_FEATURES)
    assert e.scene.ego.shape == (SMALL.history, Q.HIST_FEATURES)
    assert e.scene.road.shape[-1] == Q.ROAD_FEATURES
    assert np.isfinite(e.plans).all() and np.isfinite(e.scene.road).all()


def test_masked_monitor_when_absent(samples):
    s = samples[0]
    tok = Q.encode_scene(s.perceived, MonitorInput.absent(), SMALL)
    assert not tok.monitor_mask
    tok2 = Q.encode_scene(s.perceived, s.failure, SMALL)
    assert bool(tok2.monitor_mask) == s.failure.present


def test_encoding_is_frame_invariant(samples):
    """Shifting and rotating the whole world leaves the ego-frame tokens unchanged."""
    from plansafe.scene import dumps_scene, loads_scene, scene_to_dict, scene_from_dict

    s = samples[1]
    d = scene_to_dict(s.perceived)
    c, sn = np.cos(0.7), np.sin(0.7)

    def move(p):
        p = np.asarray(p, float)
        return (p @ np.array([[c, sn], [-sn, c]]) + [100.0, -50.0]).tolist()

    for tr in [d["ego"]] + d["agents"]:
        st = np.array(tr["states"])
        st[:, :2] = move(st[:, :2])
        st[:, 2] += 0.7
        tr["states"] = st.tolist()
    road = d["road"]
    for l in road["lanes"]:
        l["points"] = move(l["points"])
    road["drivable"] = [move(p) for p in road["drivable"]]
    road["crosswalks"] = [move(p) for p in road["crosswalks"]]
    road["route"] = move(road["route"])
    for l in road["lights"]:
        l["stop_point"] = move(l["stop_point"])
    moved = scene_from_dict(d)
    a = Q.encode_scene(s.perceived, None, SMALL)
    b = Q.encode_scene(moved, None, SMALL)
    assert np.allclose(a.ego, b.ego, atol=1e-6)
    assert np.allclose(a.agents, b.agents, atol=1e-6)


def test_gradients_match_finite_differences(encoded):
    rng = np.random.default_rng(0)
    batch, labels = random_batch(encoded, rng, SMALL)
    p = perturbed_params(SMALL, 1)
    worst, where = gradient_check(p, batch, labels, SMALL, np.array([1.0, 2.0, 0.5]), per_tensor=2)
    assert worst < 1e-4, where


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 3))
    y = np.array([0, 1, 2, 2, 0])
    w = np.array([1.0, 2.0, 3.0])
    _, g = Q.cross_entropy(logits, y, w)
    eps = 1e-6
    for i in range(5):
        for j in range(3):
            lp = logits.copy(); lp[i, j] += eps
            lm = logits.copy(); lm[i, j] -= eps
            num = (Q.cross_entropy(lp, y, w)[0] - Q.cross_entropy(lm, y, w)[0]) / (2 * eps)
            assert g[i, j] == pytest.approx(num, abs=1e-7)


def test_class_weights_and_tie_break():
    assert np.allclose(Q.class_weights([50, 30, 20]), [100 / 150, 100 / 90, 100 / 60])
    assert list(Q.conservative_argmax(np.array([[0.4, 0.4, 0.2], [0.3, 0.35, 0.35], [1 / 3] * 3]))) == [1, 2, 2]


def test_zero_head_predicts_uniform_critical(samples, model):
    pred = model.predict_batch(samples[0].perceived, samples[0].failure, samples[0].plan_states())
    assert len(pred) == 256
    assert np.allclose(pred.probs, 1 / 3)
    assert np.all(pred.classes == 2)


def test_batch_equals_single(samples):
    m = Q.QMonitor(perturbed_params(SMALL, 2), SMALL)
    s = samples[2]
    st = s.plan_states()[:6]
    batch = m.predict_batch(s.perceived, s.failure, st)
    for i in range(6):
        one = m.predict_one(s.perceived, s.failure, st[i])
        assert np.allclose(one.logits, batch.logits[i], atol=1e-9)
    with pytest.raises(ValueError):
        m.predict_batch(s.perceived, s.failure, np.repeat(st, 200, axis=0))


def test_checkpoint_round_trip(tmp_path, samples):
    m = Q.QMonitor(Q.init_params(SMALL, 4), SMALL, {"note": "x"})
    p = tmp_path / "m.spqm"
    Q.save_checkpoint(m, p, {"train": {"lr": 0.1}})
    again = Q.load_checkpoint(p)
    assert again.config == SMALL and again.meta == {"note": "x"}
    assert all(np.array_equal(again.params[k], m.params[k]) for k in m.params)
    raw = p.read_bytes()
    assert raw[:4] == b"SPQM"
    (tmp_path / "bad.spqm").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        Q.load_checkpoint(tmp_path / "bad.spqm")
    (tmp_path / "tail.spqm").write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        Q.load_checkpoint(tmp_path / "tail.spqm")


def test_training_reduces_loss(samples, encoded):
    cfg = Q.TrainConfig(epochs=12, lr=1e-2, batch=4, plans_per_scene=32, max_val_scenes=2)
    m1, h1 = Q.train(encoded[:4], encoded[4:], SMALL, cfg)
    m2, h2 = Q.train(encoded[:4], encoded[4:], SMALL, Q.TrainConfig(**{**cfg.__dict__, "epochs": 2}))
    assert [r["train_loss"] for r in h1[:2]] == [r["train_loss"] for r in h2]  # deterministic
    assert np.mean([r["train_loss"] for r in h1[-3:]]) < h1[0]["train_loss"] - 0.1
    with pytest.raises(ValueError):
        Q.train([], encoded, SMALL, cfg)


def test_repair_contract(samples):
    m = Q.QMonitor(perturbed_params(SMALL, 5), SMALL)
    s = samples[0]
    tree = s.tree()
    cand = tree.leaves[0]
    pred = m.predict_one(s.perceived, s.failure, cand)
    plan, verdict, idx = Q.repair(m, s.perceived, s.failure, cand, tree)
    if pred.classes == 0:
        assert plan is cand and idx is None
    else:
        leaf_pred = m.predict_batch(s.perceived, s.failure, tree)
        if idx is not None:
            assert leaf_pred.classes[idx] == verdict and plan is tree.leaves[idx]


def test_repair_keeps_safe_candidate(samples):
    m = Q.QMonitor(Q.init_params(SMALL, 0), SMALL)
    m.params["head.b"] = np.array([5.0, 0.0, 0.0], np.float32)  # always Safe
    s = samples[0]
    tree = s.tree()
    plan, verdict, idx = Q.repair(m, s.perceived, s.failure, tree.leaves[3], tree)
    assert plan is tree.leaves[3] and verdict == 0 and idx is None


def test_heatmap_shape(samples):
    m = Q.QMonitor(perturbed_params(SMALL, 6), SMALL)
    s = samples[0]
    spec = Q.HeatmapSpec(x_range=(-10, 10), y_range=(-5, 5), resolution=5.0)
    cls, world, xs, ys = Q.heatmap(m, s.perceived, s.tree().leaves[0], spec)
    assert cls.shape == (3, 5) and world.shape == (3, 5, 2)
    assert set(np.unique(cls)) <= {0, 1, 2}
    with pytest.raises(ValueError):
        Q.HeatmapSpec(heading="sideways").check()
