import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from plansafe.estimators import (
    ConstantClassifier,
    FRTBaseline,
    GameBaseline,
    RuleOracle,
    SafetyMonitor,
    check_samples,
    masked,
    sample_labels,
)


def test_check_samples():
    with pytest.raises(ValueError):
        check_samples([])
    with pytest.raises(TypeError):
        check_samples([1, 2])


def test_rule_oracle_scores_one(samples):
    est = RuleOracle().fit()
    assert est.score(samples) == 1.0
    assert est.predict(samples).shape == (256 * len(samples),)
    proba = est.predict_proba(samples[:1])
    assert proba.shape == (256, 3) and np.allclose(proba.sum(axis=1), 1)


def test_masked_oracle_uses_perceived_scene(samples):
    est = masked(RuleOracle().fit())
    assert est.mask_failure and not RuleOracle().mask_failure
    for s in samples:
        if s.branch == "no-failure":
            assert np.array_equal(est.predict_sample(s), s.classes)


def test_constant_classifier(samples):
    est = ConstantClassifier().fit(samples)
    y = sample_labels(samples)
    assert est.class_ == np.argmax(np.bincount(y, minlength=3))
    assert est.score(samples) == pytest.approx(np.mean(y == est.class_))
    with pytest.raises(ValueError):
        ConstantClassifier(strategy="odd").fit(samples)
    with pytest.raises(ValueError):
        est.score(samples, y[:-1])


def test_unfitted_raises(samples):
    with pytest.raises(NotFittedError):
        ConstantClassifier().predict(samples)
    with pytest.raises(ValueError):
        FRTBaseline().fit()
    with pytest.raises(ValueError):
        GameBaseline().fit()


def test_sklearn_params_and_clone():
    m = SafetyMonitor(d_model=8, heads=2, epochs=1)
    assert m.get_params()["d_model"] == 8
    c = clone(m).set_params(epochs=2)
    assert c.epochs == 2 and m.epochs == 1


def test_safety_monitor_fit_predict(samples):
    m = SafetyMonitor(d_model=8, heads=2, epochs=1, plans_per_scene=8, batch=2, val_fraction=0.3).fit(samples)
    pred = m.predict(samples[:2])
    assert pred.shape == (512,) and set(np.unique(pred)) <= {0, 1, 2}
    proba = m.predict_proba(samples[:1])
    assert np.allclose(proba.sum(axis=1), 1)
    cls, p = m.predict_with_proba(samples[0])
    assert np.array_equal(cls, pred[:256])
    assert 0 <= m.score(samples[:2]) <= 1
