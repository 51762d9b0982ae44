import numpy as np
import pytest

from plansafe import nn


def numgrad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def test_masked_softmax_rows():
    s = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    m = np.array([[True, True, False], [False, False, False]])
    a = nn.masked_softmax(s, m)
    assert np.allclose(a[0].sum(), 1.0) and a[0, 2] == 0
    assert np.all(a[1] == 0)


def test_layernorm_and_gelu_gradients():
    rng = np.random.default_rng(0)
    p = {}
    nn.init_layernorm(p, "ln", 5, np.float64)
    p["ln.g"] += rng.normal(size=5) * 0.1
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))

    def f():
        y, _ = nn.layernorm_fwd(p, "ln", x)
        g, _ = nn.gelu_fwd(y)
        return float(np.sum(w * g))

    y, c1 = nn.layernorm_fwd(p, "ln", x)
    _, c2 = nn.gelu_fwd(y)
    grads = {}
    dx = nn.layernorm_bwd(p, grads, "ln", nn.gelu_bwd(w, c2), c1)
    assert np.allclose(dx, numgrad(f, x), atol=1e-6)
    assert np.allclose(grads["ln.g"], numgrad(f, p["ln.g"]), atol=1e-6)


def test_attention_gradients():
    rng = np.random.default_rng(1)
    p = {}
    nn.init_mha(p, rng, "att", 8, np.float64)
    xq = rng.normal(size=(2, 3, 8))
    xkv = rng.normal(size=(2, 4, 8))
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    w = rng.normal(size=(2, 3, 8))

    def f():
        return float(np.sum(w * nn.mha_fwd(p, "att", xq, xkv, mask, 2)[0]))

    _, cache = nn.mha_fwd(p, "att", xq, xkv, mask, 2)
    grads = {}
    dq, dkv = nn.mha_bwd(p, grads, "att", w, cache)
    assert np.allclose(dq, numgrad(f, xq), atol=1e-6)
    assert np.allclose(dkv, numgrad(f, xkv), atol=1e-6)
    assert np.allclose(grads["att.k.W"], numgrad(f, p["att.k.W"]), atol=1e-6)


def test_masked_max():
    x = np.array([[[1.0, 5.0], [3.0, 2.0], [9.0, 9.0]]])
    m = np.array([[True, True, False]])
    y, c = nn.masked_max_fwd(x, m)
    assert np.allclose(y, [[3.0, 5.0]])
    dx = nn.masked_max_bwd(np.ones((1, 2)), c)
    assert np.allclose(dx, [[[0, 1], [1, 0], [0, 0]]])
    y0, _ = nn.masked_max_fwd(x, np.zeros((1, 3), bool))
    assert np.all(y0 == 0)


def test_adam_decays_and_descends():
    p = {"w": np.array([3.0, -2.0])}
    opt = nn.Adam(p, lr=0.1, total_steps=200, clip=0)
    for _ in range(200):
        opt.step(p, {"w": 2 * p["w"]})
    assert np.all(np.abs(p["w"]) < 0.5)
    assert opt.current_lr() == pytest.approx(0.0)
