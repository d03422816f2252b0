"""Single-outcome missing-data analysis: logistic response propensity, IPW/DR fits and wCp.

The formulas here are written directly for one response indicator ``t`` rather
than through the multi-arm machinery, so that ``as_dataset`` plus the general
modules gives an independent cross-check.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .criteria import WCP, CriterionReport, PenaltyPlugins, _invert_j
from .design import Dataset, DataValidationError, DesignSet
from .estimators import COND_THRESHOLD, DR, IPW_ESTIMATED, IPW_KNOWN, EstimatorFit, _solve
from .outcome import OutcomeFit, SingularFitError
from .propensity import DEFAULT_CLIP, PropensityConvergenceError, PropensityFit


@dataclass(frozen=True)
class MissingDataset:
    """``N`` samples with outcome ``y_i`` observed only where ``t_i = 1``.

    ``design`` has shape ``(N, m, p)``; unobserved outcome rows may hold NaN.
    """

    outcomes: np.ndarray
    missing_indicator: np.ndarray
    confounders: np.ndarray
    design: np.ndarray
    candidate_id: object = None

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        y = y[:, None] if y.ndim == 1 else y
        t = np.asarray(self.missing_indicator, dtype=float).ravel()
        z = np.asarray(self.confounders, dtype=float)
        z = z[:, None] if z.ndim == 1 else z
        x = np.asarray(self.design, dtype=float)
        if x.ndim == 2:
            x = x[:, None, :]
        n = t.shape[0]
        if not np.all((t == 0) | (t == 1)):
            raise DataValidationError("missing indicator must be 0 or 1")
        if y.shape[0] != n or z.shape[0] != n or x.shape[0] != n or x.shape[1] != y.shape[1]:
            raise DataValidationError("inconsistent dimensions in missing-data set")
        if not np.all(np.isfinite(y[t == 1])):
            raise DataValidationError("observed outcomes must be finite")
        for name, val in (("outcomes", y), ("missing_indicator", t), ("confounders", z), ("design", x)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_samples(self) -> int:
        return self.missing_indicator.shape[0]

    @property
    def n_params(self) -> int:
        return self.design.shape[-1]

    def with_design(self, design, candidate_id=None) -> "MissingDataset":
        return MissingDataset(self.outcomes, self.missing_indicator, self.confounders, design, candidate_id)

    def as_dataset(self) -> tuple:
        """Single-arm encoding ``(Dataset, DesignSet)`` for the general estimators."""
        data = Dataset(treatments=self.missing_indicator[:, None], confounders=self.confounders,
                       outcomes=np.where(self.missing_indicator[:, None] == 1, self.outcomes, 0.0))
        return data, DesignSet(self.candidate_id, self.design[:, None])


def _features(z, features, intercept):
    z = np.asarray(z, dtype=float)
    z = z[:, None] if z.ndim == 1 else z
    f = z if features is None else z[:, list(features)]
    if intercept:
        f = np.column_stack([np.ones(z.shape[0]), f])
    return f


def _binary_fit(alpha, f, clip, mode, loglik=None, n_iter=0, grad_norm=float("nan")):
    e = expit(f @ alpha)
    grads = (e * (1 - e))[:, None] * f
    return PropensityFit(alpha=alpha, scores=e[:, None], gradients=grads[:, None, :], mode=mode, loglik=loglik,
                         clip=clip, separated=bool(np.any((e < clip) | (e > 1 - clip))), n_iter=n_iter,
                         grad_norm=grad_norm)


def missing_propensity(alpha, z, features: Optional[Sequence[int]] = None, intercept: bool = True,
                       clip: float = DEFAULT_CLIP) -> PropensityFit:
    """Logistic response propensity ``e = 1 / (1 + exp(-f(z)' alpha))`` at a known ``alpha``."""
    return _binary_fit(np.asarray(alpha, dtype=float), _features(z, features, intercept), clip, "known")


def fit_missing_propensity(t, z, features: Optional[Sequence[int]] = None, intercept: bool = True,
                           clip: float = DEFAULT_CLIP, max_iter: int = 100, tol: float = 1e-8) -> PropensityFit:
    """Logistic maximum likelihood by Newton-Raphson with step halving."""
    t = np.asarray(t, dtype=float).ravel()
    if not (np.any(t == 1) and np.any(t == 0)):
        raise ValueError("both observed and missing outcomes are required")
    f = _features(z, features, intercept)

    def loglik(a):
        eta = f @ a
        return float(np.sum(t * eta - np.logaddexp(0.0, eta)))

    alpha = np.zeros(f.shape[1])
    ll = loglik(alpha)
    for it in range(max_iter + 1):
        e = expit(f @ alpha)
        score = f.T @ (t - e)
        gnorm = float(np.linalg.norm(score))
        if gnorm <= tol * max(1.0, abs(ll)):
            break
        if it == max_iter:
            if not _binary_fit(alpha, f, clip, "estimated").separated:
                raise PropensityConvergenceError(f"logistic MLE did not converge (|score|={gnorm:.3g})", gnorm)
            break
        info = (f * (e * (1 - e))[:, None]).T @ f
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = score
        scale = 1.0
        while scale > 1e-12:
            cand = alpha + scale * step
            new = loglik(cand)
            if new >= ll - 1e-12 * abs(ll):
                break
            scale *= 0.5
        alpha, ll = cand, new
    fit = _binary_fit(alpha, f, clip, "estimated", ll, it, gnorm)
    if fit.separated:
        warnings.warn("logistic response model has scores beyond the clip bound (separation)", RuntimeWarning)
    return fit


def _observed(dataset: MissingDataset):
    t = dataset.missing_indicator
    return t, np.where(t[:, None] == 1, dataset.outcomes, 0.0)


def _finish(kind, dataset, beta, w, propensity, outcome):
    t, y = _observed(dataset)
    resid = (y - dataset.design @ beta) * t[:, None]
    sq = np.sum(resid**2, axis=1)
    return EstimatorFit(kind=kind, candidate_id=dataset.candidate_id, beta_hat=beta,
                        weighted_rss=float(np.sum(w * sq)), masked_rss=float(np.sum(t * sq)),
                        residuals=resid[:, None, :], weights=w[:, None], propensity=propensity, outcome=outcome)


def ipw_missing(dataset: MissingDataset, propensity: PropensityFit,
                cond_threshold: float = COND_THRESHOLD) -> EstimatorFit:
    """``beta = (X'WX)^{-1} X'Wy`` with ``W = diag(t_i / e_i)``."""
    t, y = _observed(dataset)
    w = t / propensity.clipped_scores.ravel()
    x = dataset.design
    gram = np.einsum("n,nmp,nmq->pq", w, x, x)
    rhs = np.einsum("n,nmp,nm->p", w, x, y)
    beta = _solve(gram, rhs, dataset.candidate_id, cond_threshold)
    kind = IPW_ESTIMATED if propensity.mode == "estimated" else IPW_KNOWN
    return _finish(kind, dataset, beta, w, propensity, None)


def fit_missing_outcome(dataset: MissingDataset, features: Sequence[int] = (0,),
                        misspecified: bool = False) -> OutcomeFit:
    """Least squares of observed ``y`` on ``[X, f(z)]``; ``cond_means`` has shape ``(N, 1, m)``."""
    features = tuple(features)
    t, y = _observed(dataset)
    n, m, p = dataset.design.shape
    fz = dataset.confounders[:, list(features)] if features else np.zeros((n, 0))
    zblock = np.einsum("jk,nd->njkd", np.eye(m), fz).reshape(n, m, m * fz.shape[1])
    reg = np.concatenate([dataset.design, zblock], axis=-1)
    obs = t == 1
    a = reg[obs].reshape(-1, reg.shape[-1])
    columns = tuple([f"x_{j + 1}" for j in range(p)] + [f"z_{c + 1}" for _ in range(m) for c in features])
    if a.shape[0] <= a.shape[1] or np.linalg.matrix_rank(a) < a.shape[1]:
        raise SingularFitError("missing-data outcome regression is rank deficient", columns)
    gamma = np.linalg.lstsq(a, y[obs].reshape(-1), rcond=None)[0]
    return OutcomeFit(gamma=gamma, cond_means=(reg @ gamma)[:, None, :], features=features,
                      candidate_id=dataset.candidate_id, misspecified=misspecified, columns=columns)


def dr_missing(dataset: MissingDataset, propensity: PropensityFit, outcome: OutcomeFit,
               cond_threshold: float = COND_THRESHOLD) -> EstimatorFit:
    """``beta = (X'X)^{-1} {X'Wy + X'(I - W) E[y|z]}``."""
    if outcome is None:
        raise ValueError("doubly robust estimation needs an outcome fit")
    t, y = _observed(dataset)
    w = t / propensity.clipped_scores.ravel()
    x = dataset.design
    mu = outcome.cond_means[:, 0, :]
    gram = np.einsum("nmp,nmq->pq", x, x)
    rhs = np.einsum("n,nmp,nm->p", w, x, y) + np.einsum("n,nmp,nm->p", 1.0 - w, x, mu)
    beta = _solve(gram, rhs, dataset.candidate_id, cond_threshold)
    return _finish(DR, dataset, beta, w, propensity, outcome)


def missing_plugins(dataset: MissingDataset, fit: EstimatorFit, regime: Optional[str] = None,
                    cond_threshold: float = 1e12, strict: bool = False) -> PenaltyPlugins:
    """Sample-average moments for the missing-data wCp penalties."""
    regime = regime or fit.kind
    n = dataset.n_samples
    t = dataset.missing_indicator
    e = fit.propensity.clipped_scores.ravel()
    x = dataset.design
    xr = np.einsum("nmp,nm->np", x, fit.residuals[:, 0, :])
    term_inv_e = 2.0 * float(np.sum(t / e**2 * np.sum(xr**2, axis=1))) / n
    if regime == IPW_KNOWN:
        return PenaltyPlugins(regime=regime, term_inv_e=term_inv_e)
    if regime == IPW_ESTIMATED:
        g = fit.propensity.gradients[:, 0, :]
        lam = np.einsum("n,np,nq->pq", t / e**2, xr, g) / n
        lam_u = np.einsum("n,np,nq->pq", t / e, xr, g) / n
        j = np.einsum("n,nq,nr->qr", 1.0 / e, g, g) / n
        j_inv, singular = _invert_j(j, cond_threshold, strict)
        return PenaltyPlugins(regime=regime, term_inv_e=term_inv_e, lambda_w=lam[None], lambda_u=lam_u[None],
                              term_J=j, j_singular=singular, _j_inv=j_inv)
    if regime == DR:
        outcome = fit.outcome
        if outcome is None:
            raise ValueError("doubly robust plug-ins need an outcome fit")
        cm = outcome.cond_means[:, 0, :] - x @ fit.beta_hat
        u = np.einsum("nmp,nm->np", x, cm)
        own = np.sum(u**2, axis=1)
        return PenaltyPlugins(regime=regime, term_inv_e=term_inv_e, term_condmean_cross=float(own.sum()) / n,
                              term_condmean_inv_e=float(np.sum(own / e)) / n,
                              term_condmean_e=float(np.sum(e * own)) / n, term_condmean_own=float(own.sum()) / n)
    raise ValueError(f"unknown regime {regime!r}")


def wcp_missing(fit: EstimatorFit, plugins: PenaltyPlugins, regime: Optional[str] = None) -> CriterionReport:
    """wCp for missing data.

    Penalties: known ``alpha`` uses ``2E[(1/e) eps'XX'eps]``; estimated ``alpha``
    subtracts ``2 tr(Lambda J^{-1} Lambda')``; DR adds ``2E[(1 - 1/e) m'XX'm]``
    with ``m = E[eps | z]``.
    """
    regime = regime or fit.kind
    if plugins.regime != regime:
        raise ValueError(f"plug-ins were computed for {plugins.regime}, criterion requested for {regime}")
    penalty = plugins.term_inv_e
    if regime == IPW_ESTIMATED:
        lam = plugins.lambda_w[0]
        penalty -= 2.0 * float(np.trace(lam @ plugins._j_inv @ lam.T))
    elif regime == DR:
        penalty += 2.0 * (plugins.term_condmean_cross - plugins.term_condmean_inv_e)
    return CriterionReport(fit.candidate_id, fit.n_params, WCP, regime, fit.weighted_rss, penalty)


def simulate_mar(n: int, seed: int = 0, alpha=(1.0, 0.5), beta=(1.0, 0.5), noise_sd: float = 1.0) -> MissingDataset:
    """Missing-at-random toy data.

    ``z ~ N(0, 1)``, ``x ~ N(0, 1)`` independent of ``z``, design ``(1, x)`` so that
    ``E[X'X] = I``, ``y = X beta + z + N(0, noise_sd^2)`` (hence ``E[eps | z] = z``)
    and response probability ``expit(alpha_0 + alpha_1 z)``.
    """
    rng = np.random.default_rng(seed)
    z = rng.normal(size=n)
    x = rng.normal(size=n)
    design = np.column_stack([np.ones(n), x])[:, None, :]
    y = design[:, 0, :] @ np.asarray(beta, dtype=float) + z + rng.normal(0.0, noise_sd, size=n)
    t = (rng.uniform(size=n) < expit(alpha[0] + alpha[1] * z)).astype(float)
    return MissingDataset(outcomes=np.where(t == 1, y, np.nan)[:, None], missing_indicator=t,
                          confounders=z[:, None], design=design, candidate_id="full")
