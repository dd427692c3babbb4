import math
import warnings

import numpy as np
import pytest
from scipy import stats

from mrgenius.data import ObservationTable
from mrgenius.errors import DataValidationError, IdentificationError
from mrgenius.link import (ExternalMoments, case_control_adjust, genius_efficient_multiplicative,
                           genius_mult_exposure, genius_mult_outcome, genius_odds_ratio, mult_outcome_moment,
                           odds_ratio_moment)


def mult_outcome_table(n=4000, seed=0, beta=0.4):
    # Pr(A=1|G,U) is additive in U, so cov(A, Y(0) | G) does not vary with G
    rng = np.random.default_rng(seed)
    g = rng.binomial(1, 0.5, n).astype(float)
    u = rng.uniform(size=n)
    a = rng.binomial(1, 0.1 + 0.3 * u + 0.5 * g).astype(float)
    y = np.exp(beta * a + 0.3 * g + u) * rng.exponential(size=n)
    return ObservationTable(g=g, a=a, y=y, exposure_kind="binary")


def count_table(n=4000, seed=0, beta=0.5):
    rng = np.random.default_rng(seed)
    g = rng.binomial(1, 0.5, n).astype(float)
    u = rng.normal(size=n)
    a = rng.poisson(np.exp(0.2 + 0.5 * g + 0.3 * u) * (1 + 2 * g * rng.binomial(1, 0.5, n))).astype(float)
    y = beta * a - 0.5 * g + u + rng.normal(size=n)
    return ObservationTable(g=g, a=a, y=y, exposure_kind="count")


def odds_table(n=5000, seed=0):
    rng = np.random.default_rng(seed)
    g = rng.binomial(1, 0.5, n).astype(float)
    u = rng.normal(size=n)
    a = rng.binomial(1, 1 / (1 + np.exp(-(-0.5 + g + u)))).astype(float)
    y = np.exp(0.3 * a + 0.5 * g + 0.5 * u + 0.2 * rng.normal(size=n))
    return ObservationTable(g=g, a=a, y=y, exposure_kind="binary")


def test_mult_outcome_root_and_consistency():
    t = mult_outcome_table(n=20000, seed=1)
    est = genius_mult_outcome(t)
    assert abs(mult_outcome_moment(t, est.beta_hat)) < 1e-10
    assert abs(est.beta_hat - 0.4) < 4 * est.se
    assert est.exp_beta == pytest.approx(math.exp(est.beta_hat))
    lo, hi = est.exp_ci
    assert lo < est.exp_beta < hi


def test_mult_outcome_constant_exposure_is_unidentified():
    t = mult_outcome_table(n=200)
    flat = ObservationTable(g=t.g, a=np.zeros(t.n), y=t.y, exposure_kind="binary")
    with pytest.raises(IdentificationError):
        genius_mult_outcome(flat)


def test_mult_outcome_warns_on_negative_outcome():
    t = mult_outcome_table(n=3000, seed=2)
    y = t.y.copy()
    y[0] = -y[0]
    with pytest.warns(RuntimeWarning, match="negative"):
        genius_mult_outcome(ObservationTable(g=t.g, a=t.a, y=y, exposure_kind="binary"))


def test_external_moments_equal_to_sample_moments_reproduce_estimate():
    t = mult_outcome_table(n=3000, seed=3)
    g = t.g[:, 0]
    ext = ExternalMoments(g.mean(), {0.0: t.a[g == 0].mean(), 1.0: t.a[g == 1].mean()})
    a = genius_mult_outcome(t, exposure_model="saturated")
    b = genius_mult_outcome(t, external=ext)
    assert b.beta_hat == pytest.approx(a.beta_hat, abs=1e-10)


def test_case_control_rare_outcome_uses_controls():
    g = np.array([0, 0, 1, 1, 0, 1], float)
    a = np.array([0, 1, 1, 1, 1, 0], float)
    y = np.array([0, 0, 0, 1, 1, 0], float)
    ext = case_control_adjust(ObservationTable(g=g, a=a, y=y), rare_outcome=True)
    assert ext.e_g == pytest.approx(2 / 4)
    assert ext.e_a_given_g == {0.0: 0.5, 1.0: 0.5}


def test_case_control_sampling_fractions_hand_weights():
    g = np.array([0, 1, 1, 0], float)
    a = np.array([1, 1, 0, 0], float)
    y = np.array([1, 1, 0, 0], float)
    ext = case_control_adjust(ObservationTable(g=g, a=a, y=y), sampling_fractions=(1.0, 0.5))
    # weights 1, 1, 2, 2
    assert ext.e_g == pytest.approx(3 / 6)
    assert ext.a_given_g([0.0, 1.0]).tolist() == pytest.approx([1 / 3, 1 / 3])


def test_case_control_rejects_non_binary_outcome():
    with pytest.raises(DataValidationError):
        case_control_adjust(ObservationTable(g=[0, 1], a=[0, 1], y=[0.5, 1]), rare_outcome=True)


def test_mult_exposure_forced_zero_is_additive_with_centered_exposure():
    t = count_table(seed=4)
    est = genius_mult_exposure(t, force_zero_log_ratio=True)
    g = t.g[:, 0]
    z = (g - g.mean()) * (t.a - t.a.mean())
    assert est.beta_hat == pytest.approx(np.sum(z * t.y) / np.sum(z * t.a), rel=1e-12)


def test_mult_exposure_recovers_effect():
    t = count_table(n=20000, seed=5)
    est = genius_mult_exposure(t)
    assert abs(est.beta_hat - 0.5) < 4 * est.se
    assert est.diagnostics["variance_ratio_gap"] > 0.02


def test_mult_exposure_rare_binary_is_unidentified():
    rng = np.random.default_rng(6)
    g = rng.binomial(1, 0.5, 20000).astype(float)
    a = rng.binomial(1, 0.001 * (1 + g)).astype(float)
    t = ObservationTable(g=g, a=a, y=a + rng.normal(size=g.size), exposure_kind="binary")
    with pytest.raises(IdentificationError, match="not identified"):
        genius_mult_exposure(t)


def test_mult_exposure_rejects_negative_or_fractional_exposure():
    with pytest.raises(DataValidationError):
        genius_mult_exposure(ObservationTable(g=[0, 1, 0, 1], a=[0.5, 1, 2, 3], y=[1, 2, 3, 4]))


def test_odds_ratio_root_and_null_test():
    t = odds_table(seed=0)
    est = genius_odds_ratio(t)
    assert abs(odds_ratio_moment(t, est.beta_hat)) < 1e-12
    null = est.diagnostics["causal_null_test"]
    assert null["p_value"] == pytest.approx(2 * stats.norm.sf(abs(null["z"])))
    assert null["se"] > 0


def test_odds_ratio_zero_outcome_is_unidentified():
    t = odds_table(n=500)
    with pytest.raises(IdentificationError):
        genius_odds_ratio(ObservationTable(g=t.g, a=t.a, y=np.zeros(t.n), exposure_kind="binary"))


def test_odds_ratio_weak_denominator_uses_z_gate():
    t = odds_table(n=500, seed=1)
    with pytest.raises(IdentificationError, match=r"\|z\|"):
        genius_odds_ratio(t, min_z=1e9)


def test_odds_ratio_needs_binary_exposure():
    rng = np.random.default_rng(7)
    with pytest.raises(DataValidationError):
        genius_odds_ratio(ObservationTable(g=rng.binomial(1, .5, 50), a=rng.normal(size=50), y=np.ones(50)))


def test_efficient_multiplicative_stays_near_first_pass():
    t = mult_outcome_table(n=20000, seed=8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        first = genius_mult_outcome(t)
        eff = genius_efficient_multiplicative(t)
    assert abs(eff.beta_hat - first.beta_hat) < 3 * first.se
