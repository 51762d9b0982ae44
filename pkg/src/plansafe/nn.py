"""Small numpy layers with explicit backward passes.

Every ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache, accumulates parameter gradients into ``grads``
(a dict keyed like ``params``) and returns input gradients.
"""

from __future__ import annotations

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)


def _acc(grads, name, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g.copy()


# ---------------------------------------------------------------- linear / activations


def linear_fwd(p, name, x):
    W, b = p[name + ".W"], p[name + ".b"]
    return x @ W + b, x


def linear_bwd(p, grads, name, dy, x):
    W = p[name + ".W"]
    d_in, d_out = W.shape
    _acc(grads, name + ".W", x.reshape(-1, d_in).T @ dy.reshape(-1, d_out))
    _acc(grads, name + ".b", dy.reshape(-1, d_out).sum(axis=0))
    return dy @ W.T


def gelu_fwd(x):
    u = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    du = GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layernorm_fwd(p, name, x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    return xh * p[name + ".g"] + p[name + ".b"], (xh, inv)


def layernorm_bwd(p, grads, name, dy, cache):
    xh, inv = cache
    d = xh.shape[-1]
    _acc(grads, name + ".g", np.sum((dy * xh).reshape(-1, d), axis=0))
    _acc(grads, name + ".b", np.sum(dy.reshape(-1, d), axis=0))
    dxh = dy * p[name + ".g"]
    return inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * np.mean(dxh * xh, axis=-1, keepdims=True))


def mlp_fwd(p, name, x):
    h, c1 = linear_fwd(p, name + ".0", x)
    a, c2 = gelu_fwd(h)
    y, c3 = linear_fwd(p, name + ".1", a)
    return y, (c1, c2, c3)


def mlp_bwd(p, grads, name, dy, cache):
    c1, c2, c3 = cache
    da = linear_bwd(p, grads, name + ".1", dy, c3)
    dh = gelu_bwd(da, c2)
    return linear_bwd(p, grads, name + ".0", dh, c1)


# ---------------------------------------------------------------- attention


def masked_softmax(s, mask):
    """Softmax over the last axis restricted to ``mask``; fully masked rows give zeros."""
    neg = np.where(mask, s, -np.inf)
    mx = np.max(neg, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(np.where(mask, s, 0.0) - mx), 0.0)
    den = e.sum(axis=-1, keepdims=True)
    return e / np.where(den > 0, den, 1.0)


def _split(x, h):
    n, l, d = x.shape
    return x.reshape(n, l, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    n, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, l, h * dh)


def mha_fwd(p, name, xq, xkv, mask, heads):
    """Multi-head attention. ``xq`` (N, Lq, d), ``xkv`` (N, Lk, d), ``mask`` (N, Lk) or (N, Lq, Lk)."""
    q, cq = linear_fwd(p, name + ".q", xq)
    k, ck = linear_fwd(p, name + ".k", xkv)
    v, cv = linear_fwd(p, name + ".v", xkv)
    qh, kh, vh = _split(q, heads), _split(k, heads), _split(v, heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    m = mask[:, None, None, :] if mask.ndim == 2 else mask[:, None, :, :]
    a = masked_softmax(s, m)
    oh = a @ vh
    o = _merge(oh)
    y, co = linear_fwd(p, name + ".o", o)
    return y, (cq, ck, cv, qh, kh, vh, a, scale, co, heads)


def mha_bwd(p, grads, name, dy, cache):
    """Returns (d xq, d xkv)."""
    cq, ck, cv, qh, kh, vh, a, scale, co, heads = cache
    do = linear_bwd(p, grads, name + ".o", dy, co)
    doh = _split(do, heads)
    da = doh @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ doh
    ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dxq = linear_bwd(p, grads, name + ".q", _merge(dqh), cq)
    dxkv = linear_bwd(p, grads, name + ".k", _merge(dkh), ck)
    dxkv = dxkv + linear_bwd(p, grads, name + ".v", _merge(dvh), cv)
    return dxq, dxkv


# ---------------------------------------------------------------- pooling


def masked_max_fwd(x, mask):
    """Max over axis -2 of ``x`` (..., L, d) among ``mask`` (..., L); all-masked rows give 0."""
    neg = np.where(mask[..., None], x, -np.inf)
    idx = np.argmax(neg, axis=-2)
    y = np.take_along_axis(x, idx[..., None, :], axis=-2)[..., 0, :]
    any_valid = mask.any(axis=-1)
    y = np.where(any_valid[..., None], y, 0.0)
    return y, (idx, any_valid, x.shape)


def masked_max_bwd(dy, cache):
    idx, any_valid, shape = cache
    dx = np.zeros(shape, dtype=dy.dtype)
    np.put_along_axis(dx, idx[..., None, :], np.where(any_valid[..., None], dy, 0.0)[..., None, :], axis=-2)
    return dx


# ---------------------------------------------------------------- init / optimizer


def init_linear(params, rng, name, d_in, d_out, zero=False, dtype=np.float32):
    if zero:
        params[name + ".W"] = np.zeros((d_in, d_out), dtype)
    else:
        params[name + ".W"] = (rng.standard_normal((d_in, d_out)) * np.sqrt(1.0 / d_in)).astype(dtype)
    params[name + ".b"] = np.zeros(d_out, dtype)


def init_layernorm(params, name, d, dtype=np.float32):
    params[name + ".g"] = np.ones(d, dtype)
    params[name + ".b"] = np.zeros(d, dtype)


def init_mlp(params, rng, name, d_in, d_hidden, d_out, dtype=np.float32):
    init_linear(params, rng, name + ".0", d_in, d_hidden, dtype=dtype)
    init_linear(params, rng, name + ".1", d_hidden, d_out, dtype=dtype)


def init_mha(params, rng, name, d, dtype=np.float32):
    for part in ("q", "k", "v", "o"):
        init_linear(params, rng, f"{name}.{part}", d, d, dtype=dtype)


class Adam:
    """Adam with a linearly decaying learning rate."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, total_steps=1, weight_decay=0.0, clip=1.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.total = max(int(total_steps), 1)
        self.wd = weight_decay
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def current_lr(self):
        return self.lr * max(0.0, 1.0 - self.t / self.total)

    def step(self, params, grads):
        if self.clip:
            norm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            scale = min(1.0, self.clip / (norm + 1e-12))
        else:
            scale = 1.0
        lr = self.current_lr()
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in sorted(params):
            g = grads.get(k)
            if g is None:
                continue
            g = g * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.wd and not k.endswith(".b") and not k.endswith(".g"):
                upd = upd + self.wd * params[k]
            params[k] -= (lr * upd).astype(params[k].dtype)
