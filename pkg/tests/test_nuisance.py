import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrgenius.errors import DataValidationError, IdentificationError
from mrgenius.nuisance import (fit_linear, fit_log_mean_ratio, fit_logistic, fit_logit_contrast,
                               fit_saturated, log_mean_ratio_moment, logit_contrast)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.floats(-100, 100)), min_size=1, max_size=40))
def test_saturated_model_returns_group_means(pairs):
    g = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs])
    model = fit_saturated(y, g)
    pred = model.predict(g)
    for lv in np.unique(g):
        assert np.allclose(pred[g == lv], y[g == lv].mean())


def test_saturated_rejects_unseen_level():
    model = fit_saturated([1.0, 2.0], [0.0, 1.0])
    with pytest.raises(DataValidationError):
        model.predict([2.0])


def test_linear_matches_lstsq():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 2))
    y = rng.normal(size=50)
    model = fit_linear(y, x)
    X = np.column_stack([np.ones(50), x])
    assert np.allclose(model.coefficients, np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-12)


def test_saturated_logistic_reproduces_group_means():
    rng = np.random.default_rng(1)
    g = rng.binomial(1, 0.5, 400).astype(float)
    a = rng.binomial(1, 0.2 + 0.5 * g).astype(float)
    model = fit_logistic(a, g)
    pred = model.predict(g)
    assert abs(pred[g == 1][0] - a[g == 1].mean()) < 1e-12
    assert abs(pred[g == 0][0] - a[g == 0].mean()) < 1e-12


def test_logistic_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=30)
    a = rng.binomial(1, 0.5, 30).astype(float)
    model = fit_logistic(a, x)
    coef = model.coefficients
    grad = model.gradient(x)
    for k in range(coef.size):
        e = np.zeros_like(coef)
        e[k] = 1e-6
        fd = (model.predict(x, coef + e) - model.predict(x, coef - e)) / 2e-6
        assert np.allclose(grad[:, k], fd, atol=1e-8)


def test_log_mean_ratio_solves_its_moment():
    rng = np.random.default_rng(5)
    g = rng.binomial(2, 0.3, 1000).astype(float)
    a = rng.poisson(np.exp(0.2 + 0.4 * g)).astype(float)
    model = fit_log_mean_ratio(a, g)
    assert np.all(np.abs(log_mean_ratio_moment(a, g, model.coefficients[1:])) < 1e-8)
    assert model.coefficients[1] == pytest.approx(0.4, abs=0.1)


def test_log_mean_ratio_binary_g_closed_form():
    rng = np.random.default_rng(6)
    g = rng.binomial(1, 0.5, 500).astype(float)
    a = rng.poisson(1 + g).astype(float)
    model = fit_log_mean_ratio(a, g)
    assert model.coefficients[1] == pytest.approx(np.log(a[g == 1].mean() / a[g == 0].mean()), abs=1e-8)


def test_logit_contrast_saturated():
    g = np.array([0, 0, 0, 0, 1, 1, 1, 1], float)
    a = np.array([0, 0, 0, 1, 0, 1, 1, 1], float)
    model = fit_logit_contrast(a, g)
    phi = logit_contrast(model, np.array([1.0]))
    assert phi[0] == pytest.approx(np.log(3) - np.log(1 / 3))


def test_logit_contrast_rejects_constant_level():
    with pytest.raises(IdentificationError):
        fit_logit_contrast(np.array([0, 0, 1, 1.0]), np.array([0, 0, 1, 1.0]))
