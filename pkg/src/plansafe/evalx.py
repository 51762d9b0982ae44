"""Metrics, method comparison, failure-free filter study and throughput benchmark."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .rules import DEFAULT_RULES, SafetyClass, evaluate_plans

log = logging.getLogger(__name__)

N = len(SafetyClass)
LABELS = [c.label for c in SafetyClass]
BINARY_MAPS = ("unsafe-critical", "unsafe-nonsafe")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (N, N) or (c < 0).any():
            raise ValueError("confusion counts must be a non-negative 3x3 array")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)


def confusion(y_true, y_pred) -> ConfusionMatrix:
    y_true = np.asarray(y_true, np.int64).ravel()
    y_pred = np.asarray(y_pred, np.int64).ravel()
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} labels vs {len(y_pred)} predictions")
    for a in (y_true, y_pred):
        if len(a) and (a.min() < 0 or a.max() >= N):
            raise ValueError("labels must lie in {0, 1, 2}")
    return ConfusionMatrix(np.bincount(y_true * N + y_pred, minlength=N * N).reshape(N, N))


def auroc_rank(y_binary, scores) -> float:
    """Area under the ROC curve by the Mann-Whitney rank statistic (ties count half)."""
    y = np.asarray(y_binary, bool).ravel()
    s = np.asarray(scores, float).ravel()
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    r = rankdata(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_trapezoid(y_binary, scores) -> float:
    """Area under the ROC curve by trapezoidal integration over distinct thresholds."""
    y = np.asarray(y_binary, bool).ravel()
    s = np.asarray(scores, float).ravel()
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.r_[0, np.cumsum(y)[last]] / n_pos
    fp = np.r_[0, np.cumsum(~y)[last]] / n_neg
    return float(np.trapezoid(tp, fp))


@dataclass
class MetricReport:
    accuracy: float  # macro: mean per-class recall
    precision: float
    recall: float
    f1: float
    per_class: dict  # label -> {precision, recall, f1, support}
    auroc: dict = field(default_factory=dict)  # label -> value, plus "mean"
    raw_accuracy: float = float("nan")  # fraction of plans classified correctly
    n: int = 0
    hz: Optional[float] = None
    ci: dict = field(default_factory=dict)  # metric -> (lo, hi)

    def row(self) -> dict:
        out = {
            "n": self.n,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "raw_accuracy": self.raw_accuracy,
        }
        for label, m in self.per_class.items():
            for k in ("precision", "recall", "f1"):
                out[f"{label.lower()}_{k}"] = m[k]
        for label, v in self.auroc.items():
            out[f"auroc_{label.lower()}"] = v
        for k, (lo, hi) in self.ci.items():
            out[f"{k}_ci_lo"] = lo
            out[f"{k}_ci_hi"] = hi
        if self.hz is not None:
            out["hz"] = self.hz
        return out


def _safe_div(a, b):
    return float(a) / float(b) if b else float("nan")


def metrics(cm: ConfusionMatrix, scores=None, y_true=None, average: str = "macro") -> MetricReport:
    """Macro metrics over classes with support; AUROC one-vs-rest when scores are given."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    if average not in ("macro", "weighted"):
        raise ValueError("average must be 'macro' or 'weighted'")
    c = cm.counts
    support = c.sum(axis=1)
    pred = c.sum(axis=0)
    per = {}
    for k in range(N):
        p = _safe_div(c[k, k], pred[k])
        r = _safe_div(c[k, k], support[k])
        f = 2 * p * r / (p + r) if np.isfinite(p) and np.isfinite(r) and p + r > 0 else (0.0 if np.isfinite(p) and np.isfinite(r) else float("nan"))
        per[LABELS[k]] = {"precision": p, "recall": r, "f1": f, "support": int(support[k])}
    used = [k for k in range(N) if support[k] > 0]
    missing = [LABELS[k] for k in range(N) if support[k] == 0]
    if missing:
        warnings.warn(f"classes without support excluded from the average: {missing}", RuntimeWarning, stacklevel=2)
    w = support[used] / support[used].sum() if average == "weighted" else np.full(len(used), 1.0 / len(used))

    def avg(key):
        vals = np.array([per[LABELS[k]][key] for k in used], float)
        vals = np.where(np.isfinite(vals), vals, 0.0)  # a class never predicted has precision 0
        return float(np.sum(w * vals))

    rec = avg("recall")
    report = MetricReport(
        accuracy=rec,
        precision=avg("precision"),
        recall=rec,
        f1=avg("f1"),
        per_class=per,
        raw_accuracy=float(np.trace(c) / cm.total),
        n=cm.total,
    )
    if scores is not None:
        if y_true is None:
            raise ValueError("AUROC needs y_true alongside scores")
        scores = np.asarray(scores, float)
        y_true = np.asarray(y_true, np.int64)
        au = {LABELS[k]: auroc_rank(y_true == k, scores[:, k]) for k in range(N)}
        vals = [v for v in au.values() if np.isfinite(v)]
        au["mean"] = float(np.mean(vals)) if vals else float("nan")
        report.auroc = au
    return report


def bootstrap_ci(groups, stat, n_boot: int = 1000, seed: int = 0, level: float = 0.95):
    """Percentile interval of ``stat`` over resampled groups.

    ``groups`` is a list of per-group payloads (one per scene, so plans of one
    scene stay together); ``stat`` maps a list of payloads to a float.
    """
    rng = np.random.default_rng(seed)
    G = len(groups)
    if G == 0:
        return (float("nan"), float("nan"))
    vals = []
    for _ in range(n_boot):
        idx = rng.integers(0, G, G)
        v = stat([groups[i] for i in idx])
        if np.isfinite(v):
            vals.append(v)
    if not vals:
        return (float("nan"), float("nan"))
    a = (1 - level) / 2
    return (float(np.quantile(vals, a)), float(np.quantile(vals, 1 - a)))


# ---------------------------------------------------------------- comparison


def map_binary(pred, y_true, mode: str = "unsafe-critical") -> np.ndarray:
    """Project binary baseline verdicts (0 safe / 2 unsafe) onto the three classes.

    ``unsafe-critical``: unsafe is Critical, safe is Safe.
    ``unsafe-nonsafe``: an unsafe verdict counts as whichever non-Safe class is true
    (Critical when the truth is Safe), safe is Safe.
    """
    pred = np.asarray(pred, np.int64)
    if mode == "unsafe-critical":
        return pred
    if mode == "unsafe-nonsafe":
        y_true = np.asarray(y_true, np.int64)
        out = pred.copy()
        unsafe = pred != SafetyClass.SAFE
        out[unsafe] = np.where(y_true[unsafe] == SafetyClass.RISKY, SafetyClass.RISKY, SafetyClass.CRITICAL)
        return out
    raise ValueError(f"binary mapping must be one of {BINARY_MAPS}")


def candidate_mask(sample, rules=DEFAULT_RULES) -> np.ndarray:
    """Plans not already Critical on the perceived scene: the ones a planner would still propose."""
    _, cls = evaluate_plans(sample.plan_states(), sample.perceived, rules)
    return cls != SafetyClass.CRITICAL


@dataclass
class MethodResult:
    name: str
    y_true: np.ndarray
    y_pred: np.ndarray
    scores: Optional[np.ndarray]
    groups: np.ndarray  # sample index per plan
    seconds: float

    def subset(self, mask):
        return MethodResult(
            self.name,
            self.y_true[mask],
            self.y_pred[mask],
            None if self.scores is None else self.scores[mask],
            self.groups[mask],
            self.seconds,
        )

    def report(self, n_boot: int = 1000, seed: int = 0) -> MetricReport:
        cm = confusion(self.y_true, self.y_pred)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep = metrics(cm, self.scores, self.y_true if self.scores is not None else None)
        rep.hz = len(np.unique(self.groups)) / self.seconds if self.seconds > 0 else None
        if n_boot:
            rep.ci = headline_ci(self.y_true, self.y_pred, self.groups, n_boot, seed)
        return rep


def headline_ci(y_true, y_pred, groups, n_boot=1000, seed=0) -> dict:
    ids = np.unique(groups)
    parts = [(y_true[groups == g], y_pred[groups == g]) for g in ids]

    def stat(key, cls=None):
        def f(sel):
            yt = np.concatenate([p[0] for p in sel])
            yp = np.concatenate([p[1] for p in sel])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                r = metrics(confusion(yt, yp))
            return r.per_class[cls][key] if cls else getattr(r, key)

        return f

    return {
        "accuracy": bootstrap_ci(parts, stat("accuracy"), n_boot, seed),
        "f1": bootstrap_ci(parts, stat("f1"), n_boot, seed),
        "critical_recall": bootstrap_ci(parts, stat("recall", "Critical"), n_boot, seed),
    }


def run_method(name, estimator, samples, binary: bool = False, mapping: str = "unsafe-critical") -> MethodResult:
    yt, yp, sc, gr = [], [], [], []
    t0 = time.perf_counter()
    for i, s in enumerate(samples):
        if binary:
            pred = estimator.predict_sample(s)
        else:
            pred, proba = estimator.predict_with_proba(s)
            sc.append(proba)
        y = np.asarray(s.classes, np.int64)
        if binary:
            pred = map_binary(pred, y, mapping)
        yt.append(y)
        yp.append(np.asarray(pred, np.int64))
        gr.append(np.full(len(y), i))
    seconds = time.perf_counter() - t0
    return MethodResult(
        name,
        np.concatenate(yt),
        np.concatenate(yp),
        np.concatenate(sc) if sc else None,
        np.concatenate(gr),
        seconds,
    )


def compare(samples, methods: dict, binary=(), mapping: str = "unsafe-critical", n_boot: int = 1000, seed: int = 0):
    """Evaluate every method on every (sample, plan).

    Returns ``{"candidate": {name: MetricReport}, "all": {...}, "results": {name: MethodResult}}``.
    The candidate subset keeps plans not already Critical on the perceived scene.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    mask = np.concatenate([candidate_mask(s) for s in samples])
    results = {name: run_method(name, est, samples, name in binary, mapping) for name, est in methods.items()}
    out = {"candidate": {}, "all": {}, "results": results, "candidate_mask": mask}
    for name, r in results.items():
        out["all"][name] = r.report(n_boot, seed)
        out["candidate"][name] = r.subset(mask).report(n_boot, seed)
    return out


def write_metrics_csv(reports: dict, path) -> None:
    rows = [{"method": name, **rep.row()} for name, rep in reports.items()]
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in keys})


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + LABELS)
        for k in range(N):
            w.writerow([LABELS[k]] + [int(x) for x in cm.counts[k]])


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


# ---------------------------------------------------------------- filter study


@dataclass
class FilterReport:
    flagged: float  # fraction of ground-truth Critical plans predicted non-Safe; nan when undefined
    support: int
    ci: tuple = (float("nan"), float("nan"))


def filter_study(samples, estimator, n_boot: int = 1000, seed: int = 0) -> FilterReport:
    """Failure masked at inference; among truly Critical plans, the fraction not predicted Safe."""
    from .estimators import masked

    est = masked(estimator)
    parts = []
    for s in samples:
        y = np.asarray(s.classes, np.int64)
        crit = y == SafetyClass.CRITICAL
        if not crit.any():
            parts.append((0, 0))
            continue
        pred = np.asarray(est.predict_sample(s))
        parts.append((int(np.sum(pred[crit] != SafetyClass.SAFE)), int(crit.sum())))

    def frac(sel):
        n = sum(p[1] for p in sel)
        return sum(p[0] for p in sel) / n if n else float("nan")

    support = sum(p[1] for p in parts)
    if support == 0:
        return FilterReport(float("nan"), 0)
    return FilterReport(frac(parts), support, bootstrap_ci(parts, frac, n_boot, seed))


# ---------------------------------------------------------------- benchmark


def _timings(fn, repeats, warmup):
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return np.array(out)


def _summary(t):
    return {"median_s": float(np.median(t)), "p95_s": float(np.quantile(t, 0.95)), "hz": float(1.0 / np.median(t)), "repeats": len(t)}


def bench(model, perceived, failure, tree, n_plans: int = 256, repeats: int = 5, warmup: int = 1, sequential: bool = True) -> dict:
    """Wall time of one batched forward pass, of n single-plan calls, and of repair."""
    from .qmonitor import repair

    states = tree.states()[:n_plans]
    out = {"n_plans": len(states), "n_parameters": model.n_parameters, "d_model": model.config.d_model}
    out["batched"] = _summary(_timings(lambda: model.predict_batch(perceived, failure, states), repeats, warmup))
    if sequential:
        def seq():
            for st in states:
                model.predict_batch(perceived, failure, st[None])

        out["sequential"] = _summary(_timings(seq, max(1, min(repeats, 2)), 0))
        out["speedup"] = out["sequential"]["median_s"] / out["batched"]["median_s"]
    out["repair"] = _summary(_timings(lambda: repair(model, perceived, failure, tree.leaves[0], tree), repeats, warmup))
    return out
