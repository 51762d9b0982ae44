import numpy as np

from plansafe import qmonitor as Q


def gradient_check(params, batch, labels, cfg, weights=None, per_tensor=3, eps=1e-4, seed=0):
    """Worst relative error between analytic and central-difference gradients.

    Checks ``per_tensor`` random entries of every parameter; the denominator has
    an absolute floor so entries with a zero true gradient do not blow up.
    """
    rng = np.random.default_rng(seed)
    _, grads = Q.loss_and_grad(params, batch, labels, cfg, weights)
    worst, where = 0.0, None
    for name in sorted(params):
        flat = params[name].reshape(-1)
        for i in rng.choice(flat.size, min(per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            lp, _ = Q.cross_entropy(Q.forward(params, batch, cfg), labels, weights)
            flat[i] = old - eps
            lm, _ = Q.cross_entropy(Q.forward(params, batch, cfg), labels, weights)
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            ana = float(grads[name].reshape(-1)[i])
            err = abs(num - ana) / max(abs(num) + abs(ana), 1e-6)
            if err > worst:
                worst, where = err, (name, int(i), num, ana)
    return worst, where


def random_batch(encoded, rng, cfg, plans=4):
    """float64 batch of two encoded samples with random plan subsets."""
    pick = rng.choice(len(encoded), 2, replace=False)
    scenes, feats, labels = [], [], []
    for k in pick:
        e = encoded[k]
        idx = rng.choice(len(e.labels), plans, replace=False)
        scenes.append(e.scene)
        feats.append(e.plans[idx])
        labels.append(e.labels[idx])
    return Q.collate(scenes, feats, np.float64), np.stack(labels)


def perturbed_params(cfg, seed):
    """Small-model parameters with a non-zero head so every gradient path is live."""
    p = Q.init_params(cfg, seed, np.float64)
    rng = np.random.default_rng(seed)
    p["head.W"] = rng.standard_normal(p["head.W"].shape) * 0.5
    return p
