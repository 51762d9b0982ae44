"""scikit-learn style estimators over labeled samples.

``X`` is a sequence of :class:`~plansafe.datagen.LabeledSample`; every sample
contributes its 256 plans, so ``predict(X)`` returns one class per (sample,
plan) in order. ``y`` is optional: the labels stored in the samples are used
when it is omitted.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import qmonitor as Q
from .datagen import LabeledSample
from .rules import DEFAULT_RULES, SafetyClass, evaluate_plans
from .scene import MonitorInput

CLASSES = np.array([int(c) for c in SafetyClass])


def check_samples(X) -> list:
    """Validate ``X`` as a non-empty sequence of labeled samples."""
    if isinstance(X, LabeledSample):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("need at least one sample")
    for s in X:
        if not isinstance(s, LabeledSample):
            raise TypeError(f"expected LabeledSample, got {type(s).__name__}")
    return X


def sample_labels(X) -> np.ndarray:
    return np.concatenate([np.asarray(s.classes, np.int64) for s in check_samples(X)])


def _check_y(X, y) -> np.ndarray:
    if y is None:
        return sample_labels(X)
    y = np.asarray(y, np.int64).ravel()
    n = sum(len(s.classes) for s in X)
    if len(y) != n:
        raise ValueError(f"y has {len(y)} labels for {n} plans")
    if not np.isin(y, CLASSES).all():
        raise ValueError("labels must be 0 (Safe), 1 (Risky) or 2 (Critical)")
    return y


class PlanClassifier(ClassifierMixin, BaseEstimator):
    """Shared plumbing: per-sample prediction, concatenation, scoring."""

    mask_failure = False

    def _failure(self, sample) -> Optional[MonitorInput]:
        return MonitorInput.absent() if self.mask_failure else sample.failure

    def predict_sample(self, sample) -> np.ndarray:
        raise NotImplementedError

    def predict_proba_sample(self, sample) -> np.ndarray:
        cls = self.predict_sample(sample)
        return np.eye(len(CLASSES))[cls]

    def predict_with_proba(self, sample):
        return self.predict_sample(sample), self.predict_proba_sample(sample)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self)
        return np.concatenate([self.predict_sample(s) for s in check_samples(X)])

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self)
        return np.concatenate([self.predict_proba_sample(s) for s in check_samples(X)])

    def score(self, X, y=None, sample_weight=None):
        X = check_samples(X)
        y = _check_y(X, y)
        return float(np.average(self.predict(X) == y, weights=sample_weight))


class RuleOracle(PlanClassifier):
    """Ground truth: evaluates every plan on the monitored scene with the rule hierarchy."""

    def __init__(self, rules=DEFAULT_RULES):
        self.rules = rules

    def fit(self, X=None, y=None):
        self.classes_ = CLASSES
        return self

    def predict_sample(self, sample):
        scene = sample.perceived if self.mask_failure else sample.monitored
        return evaluate_plans(sample.plan_states(), scene, self.rules)[1]


class ConstantClassifier(PlanClassifier):
    """Predicts a single class; ``strategy='most_frequent'`` learns it from the training labels."""

    def __init__(self, strategy: str = "most_frequent", constant: int = 0):
        self.strategy = strategy
        self.constant = constant

    def fit(self, X, y=None):
        X = check_samples(X)
        if self.strategy == "most_frequent":
            self.class_ = int(np.argmax(np.bincount(_check_y(X, y), minlength=len(CLASSES))))
        elif self.strategy == "constant":
            self.class_ = int(self.constant)
        else:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        self.classes_ = CLASSES
        return self

    def predict_sample(self, sample):
        return np.full(len(sample.classes), self.class_, np.int64)


class FRTBaseline(PlanClassifier):
    """Forward-reachable-tube check of each plan against the reported agent."""

    def __init__(self, family=None, d_col: float = 0.5):
        self.family = family
        self.d_col = d_col

    def fit(self, X=None, y=None):
        if self.family is None:
            raise ValueError("FRTBaseline needs a precomputed family (run reach-precompute)")
        self.classes_ = CLASSES
        return self

    def predict_sample(self, sample):
        from .reachability import classify_plan_frt

        return classify_plan_frt(sample.plan_states(), self.family, self._failure(sample), self.d_col)


class GameBaseline(PlanClassifier):
    """Two-player game backward-reachable-tube check against the reported agent."""

    def __init__(self, family=None):
        self.family = family

    def fit(self, X=None, y=None):
        if self.family is None:
            raise ValueError("GameBaseline needs a precomputed family (run reach-precompute)")
        self.classes_ = CLASSES
        return self

    def predict_sample(self, sample):
        from .reachability import classify_plan_game

        return classify_plan_game(sample.plan_states(), self.family, self._failure(sample))


class SafetyMonitor(PlanClassifier):
    """Learned monitor with fit/predict; wraps :func:`plansafe.qmonitor.train`."""

    def __init__(
        self,
        d_model: int = 64,
        heads: int = 4,
        epochs: int = 30,
        lr: float = 1e-3,
        batch: int = 8,
        plans_per_scene: int = 32,
        val_fraction: float = 0.2,
        seed: int = 0,
        model=None,
    ):
        self.d_model = d_model
        self.heads = heads
        self.epochs = epochs
        self.lr = lr
        self.batch = batch
        self.plans_per_scene = plans_per_scene
        self.val_fraction = val_fraction
        self.seed = seed
        self.model = model

    def model_config(self) -> Q.ModelConfig:
        return Q.ModelConfig(d_model=self.d_model, heads=self.heads)

    def train_config(self) -> Q.TrainConfig:
        return Q.TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            batch=self.batch,
            plans_per_scene=self.plans_per_scene,
            seed=self.seed,
            val_fraction=self.val_fraction,
        )

    def fit(self, X, y=None):
        from .datagen import split_by_scene

        X = check_samples(X)
        if y is not None:
            raise ValueError("labels are read from the samples; pass y=None")
        train, val = split_by_scene(X, self.val_fraction, self.seed)
        cfg = self.model_config()
        enc_train = [Q.encode_sample(s, cfg) for s in train]
        enc_val = [Q.encode_sample(s, cfg) for s in val]
        self.model_, self.history_ = Q.train(enc_train, enc_val, cfg, self.train_config())
        self.classes_ = CLASSES
        return self

    def _fitted_model(self):
        if hasattr(self, "model_"):
            return self.model_
        if self.model is not None:
            return self.model
        check_is_fitted(self, "model_")

    def predict(self, X):
        if self.model is not None and not hasattr(self, "classes_"):
            self.classes_ = CLASSES
        return super().predict(X)

    def predict_proba(self, X):
        if self.model is not None and not hasattr(self, "classes_"):
            self.classes_ = CLASSES
        return super().predict_proba(X)

    def prediction(self, sample) -> Q.Prediction:
        model = self._fitted_model()
        return model.predict_tokens(
            Q.encode_scene(sample.perceived, self._failure(sample), model.config),
            Q.encode_plans(sample.perceived, sample.plan_states(), model.config, self._failure(sample)),
        )

    def predict_sample(self, sample):
        return self.prediction(sample).classes

    def predict_with_proba(self, sample):
        p = self.prediction(sample)
        return p.classes, p.probs

    def predict_proba_sample(self, sample):
        return self.prediction(sample).probs


def masked(estimator):
    """Copy of ``estimator`` that ignores the failure report at inference."""
    import copy

    out = copy.copy(estimator)
    out.mask_failure = True
    return out
