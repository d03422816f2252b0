import numpy as np
import pytest
from scipy.special import expit

from msmcp.criteria import penalty_plugins, wcp
from msmcp.design import DataValidationError
from msmcp.estimators import DR, IPW_ESTIMATED, IPW_KNOWN, dr_fit, ipw_fit
from msmcp.missing import (MissingDataset, dr_missing, fit_missing_outcome, fit_missing_propensity, ipw_missing,
                           missing_plugins, missing_propensity, simulate_mar, wcp_missing)
from msmcp.outcome import OutcomeFit
from msmcp.propensity import PropensityFit
from oracles import mar_population_penalties

ALPHA = (1.0, 0.5)


def _ones(n):
    return PropensityFit(alpha=np.zeros(0), scores=np.ones((n, 1)), gradients=np.zeros((n, 1, 0)), clip=0.0)


def _zero_outcome(n, m=1):
    return OutcomeFit(gamma=np.zeros(0), cond_means=np.zeros((n, 1, m)), features=())


def _full(n=50, seed=0):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = x @ [1.0, 2.0] + rng.normal(size=n)
    return MissingDataset(y, np.ones(n), rng.normal(size=n), x[:, None, :]), x, y


def _fit(data, regime, alpha=ALPHA):
    if regime == IPW_KNOWN:
        prop = missing_propensity(alpha, data.confounders)
    else:
        prop = fit_missing_propensity(data.missing_indicator, data.confounders)
    if regime == DR:
        return dr_missing(data, prop, fit_missing_outcome(data))
    return ipw_missing(data, prop)


def test_intercept_only_response_model_recovers_observed_fraction():
    rng = np.random.default_rng(1)
    t = (rng.uniform(size=300) < 0.3).astype(float)
    fit = fit_missing_propensity(t, rng.normal(size=300), features=[])
    np.testing.assert_allclose(fit.scores, t.mean(), atol=1e-10)


def test_logistic_slope_consistent_and_first_order_condition():
    rng = np.random.default_rng(2)
    z = rng.normal(size=2000)
    t = (rng.uniform(size=2000) < expit(z)).astype(float)
    fit = fit_missing_propensity(t, z)
    assert fit.grad_norm <= 1e-8 * max(1.0, abs(fit.loglik))
    e = fit.scores[:, 0]
    f = np.column_stack([np.ones(2000), z])
    se = np.sqrt(np.diag(np.linalg.inv((f * (e * (1 - e))[:, None]).T @ f)))
    assert abs(fit.alpha[1] - 1.0) <= 3 * se[1]


def test_logistic_mle_matches_grid_search():
    rng = np.random.default_rng(3)
    z = rng.normal(size=40)
    t = (rng.uniform(size=40) < expit(0.8 * z)).astype(float)
    fit = fit_missing_propensity(t, z, intercept=False)
    grid = np.arange(-2.0, 4.0, 1e-4)
    ll = [np.sum(t * a * z - np.logaddexp(0, a * z)) for a in grid]
    assert abs(fit.alpha[0] - grid[int(np.argmax(ll))]) <= 1e-4


def test_response_model_needs_both_classes_and_warns_on_separation():
    with pytest.raises(ValueError):
        fit_missing_propensity(np.ones(10), np.arange(10.0))
    z = np.linspace(-3, 3, 30)
    with pytest.warns(RuntimeWarning, match="clip"):
        fit = fit_missing_propensity((z > 0).astype(float), z, max_iter=60)
    assert fit.separated


def test_full_observation_gives_ols():
    data, x, y = _full()
    ols = np.linalg.lstsq(x, y, rcond=None)[0]
    ones = _ones(50)
    np.testing.assert_allclose(ipw_missing(data, ones).beta_hat, ols, atol=1e-12)
    junk = OutcomeFit(gamma=np.zeros(0), cond_means=np.random.default_rng(0).normal(size=(50, 1, 1)), features=())
    np.testing.assert_allclose(dr_missing(data, ones, junk).beta_hat, ols, atol=1e-12)


def test_three_sample_hand_values():
    x = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    y = np.array([1.0, np.nan, 5.0])
    t = np.array([1.0, 0.0, 1.0])
    data = MissingDataset(y, t, np.zeros(3), x[:, None, :])
    e = np.array([0.5, 0.4, 0.25])
    prop = PropensityFit(alpha=np.zeros(0), scores=e[:, None], gradients=np.zeros((3, 1, 0)))
    w = np.diag(t / e)
    yo = np.nan_to_num(y)
    np.testing.assert_allclose(ipw_missing(data, prop).beta_hat, np.linalg.solve(x.T @ w @ x, x.T @ w @ yo),
                               atol=1e-12)
    dr = dr_missing(data, prop, _zero_outcome(3))
    np.testing.assert_allclose(dr.beta_hat, np.linalg.solve(x.T @ x, x.T @ w @ yo), atol=1e-12)


def test_validation():
    with pytest.raises(DataValidationError):
        MissingDataset(np.ones(3), np.array([1, 2, 0]), np.zeros(3), np.ones((3, 1, 1)))
    with pytest.raises(DataValidationError, match="finite"):
        MissingDataset(np.array([np.nan, 1.0]), np.ones(2), np.zeros(2), np.ones((2, 1, 1)))


@pytest.mark.parametrize("regime", [IPW_KNOWN, IPW_ESTIMATED, DR])
def test_estimators_consistent_under_mar(regime):
    bias = np.zeros(2)
    reps = 40
    for s in range(reps):
        bias += (_fit(simulate_mar(5000, seed=s), regime).beta_hat - [1.0, 0.5]) / reps
    assert np.abs(bias).max() <= 0.05


def test_double_robustness_directions():
    bias_out, bias_prop = np.zeros(2), np.zeros(2)
    reps = 40
    for s in range(reps):
        data = simulate_mar(5000, seed=100 + s)
        good = fit_missing_propensity(data.missing_indicator, data.confounders)
        bias_out += (dr_missing(data, good, fit_missing_outcome(data, features=())).beta_hat - [1.0, 0.5]) / reps
        wrong = fit_missing_propensity(data.missing_indicator, data.confounders, features=[])
        bias_prop += (dr_missing(data, wrong, fit_missing_outcome(data)).beta_hat - [1.0, 0.5]) / reps
    assert np.abs(bias_out).max() <= 0.05 and np.abs(bias_prop).max() <= 0.05


def test_unit_scores_cancel_dr_term():
    data, _, _ = _full(seed=4)
    ones = _ones(50)
    fit = dr_missing(data, ones, fit_missing_outcome(data))
    pl = missing_plugins(data, fit, DR)
    r = fit.residuals[:, 0, 0]
    x = data.design[:, 0, :]
    direct = 2 * np.mean(r**2 * (x**2).sum(axis=1))
    assert wcp_missing(fit, pl).penalty == pytest.approx(direct, rel=1e-12)


def test_zero_residuals_zero_penalty():
    x = np.column_stack([np.ones(20), np.arange(20.0)])
    data = MissingDataset(x @ [1.0, 2.0], np.r_[np.ones(15), np.zeros(5)], np.arange(20.0), x[:, None, :])
    fit = ipw_missing(data, missing_propensity([0.5, 0.0], data.confounders))
    assert wcp_missing(fit, missing_plugins(data, fit)).penalty == pytest.approx(0.0, abs=1e-18)


def test_dr_penalty_not_above_known_term():
    for s in range(10):
        data = simulate_mar(500, seed=s)
        fit = _fit(data, DR)
        pl = missing_plugins(data, fit, DR)
        assert wcp_missing(fit, pl).penalty <= pl.term_inv_e + 1e-12


@pytest.mark.parametrize("regime", [IPW_KNOWN, IPW_ESTIMATED, DR])
def test_single_arm_reduction_matches_general_criteria(regime):
    data = simulate_mar(400, seed=7)
    fit = _fit(data, regime)
    direct = wcp_missing(fit, missing_plugins(data, fit, regime))
    gdata, gdesign = data.as_dataset()
    prop = fit.propensity
    if regime == DR:
        gfit = dr_fit(gdata, gdesign, prop, fit.outcome)
    else:
        gfit = ipw_fit(gdata, gdesign, prop, kind=regime)
    general = wcp(gfit, penalty_plugins(gdata, gdesign, gfit, regime=regime))
    np.testing.assert_allclose(gfit.beta_hat, fit.beta_hat, rtol=1e-12)
    assert general.total == pytest.approx(direct.total, rel=1e-10, abs=1e-10)


@pytest.mark.parametrize("regime", [IPW_KNOWN, IPW_ESTIMATED, DR])
def test_plugin_matches_population_oracle(regime):
    pop = mar_population_penalties()
    data = simulate_mar(20000, seed=11)
    fit = _fit(data, regime)
    penalty = wcp_missing(fit, missing_plugins(data, fit, regime)).penalty
    assert penalty == pytest.approx(pop[regime], rel=0.05)
