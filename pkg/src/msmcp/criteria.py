"""Cp-type model selection criteria for IPW and doubly robust fits.

Every population expectation in the penalties is replaced by a sample average.
Expectations that involve the treatment indicator are estimated over observed
arms with weight ``t/e``, so for example

    E[(1/e^(h)) eps' X^(h) X^(h)' eps]  ->  (1/N) sum_i t_i^(h) / e_i^(h)^2 * r_i' X X' r_i

with ``r_i`` the residual of the fitted candidate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .design import Dataset, DesignSet
from .estimators import DR, IPW_ESTIMATED, IPW_KNOWN, EstimatorFit
from .outcome import OutcomeFit, arm_residual_means, conditional_residual_means
from .propensity import PropensityFit

QICW = "QICw"
WCP = "wCp"
UCP = "uCp"
WCP_CONDITIONAL = "wCp_conditional"
CRITERIA = (QICW, WCP, UCP, WCP_CONDITIONAL)


class PenaltyError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class CriterionReport:
    candidate_id: object
    n_params: int
    criterion: str
    regime: str
    gof: float
    penalty: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.gof + self.penalty)


@dataclass(frozen=True)
class PenaltyPlugins:
    """Sample-average estimates of the moments entering the penalties.

    ``term_inv_e`` already carries the factor 2; the conditional-mean terms do not.
    ``lambda_w[h]`` and ``lambda_u[h]`` are the ``p x q`` moments with and without
    the ``1/e`` factor.
    """

    regime: str
    term_inv_e: float
    lambda_w: Optional[np.ndarray] = None
    lambda_u: Optional[np.ndarray] = None
    term_J: Optional[np.ndarray] = None
    term_condmean_cross: float = 0.0
    term_condmean_inv_e: float = 0.0
    term_condmean_e: float = 0.0
    term_condmean_own: float = 0.0
    j_singular: bool = False
    _j_inv: Optional[np.ndarray] = field(default=None, repr=False)

    def correction(self, weighted: bool = True) -> float:
        """``2 sum_{k,h} tr(Lambda^(k) J^{-1} L^(h)')`` with ``L = Lambda`` or its unweighted twin."""
        if self.lambda_w is None or self._j_inv is None:
            return 0.0
        left = self.lambda_w.sum(axis=0)
        right = (self.lambda_w if weighted else self.lambda_u).sum(axis=0)
        return 2.0 * float(np.trace(left @ self._j_inv @ right.T))


def _invert_j(j: np.ndarray, threshold: float, strict: bool):
    cond = np.linalg.cond(j) if j.size else 1.0
    if np.isfinite(cond) and cond <= threshold:
        return np.linalg.inv(j), False
    if strict:
        raise PenaltyError(f"J is singular (condition number {cond:.3g})")
    warnings.warn(f"J is ill-conditioned (condition number {cond:.3g}); using the pseudo-inverse", RuntimeWarning)
    return np.linalg.pinv(j), True


def penalty_plugins(dataset: Dataset, design: DesignSet, fit: EstimatorFit,
                    propensity: Optional[PropensityFit] = None, outcome: Optional[OutcomeFit] = None,
                    regime: Optional[str] = None, cond_threshold: float = 1e12,
                    strict: bool = False) -> PenaltyPlugins:
    """Plug-in estimates of the penalty moments for one fitted candidate."""
    regime = regime or fit.kind
    propensity = propensity or fit.propensity
    n = dataset.n_samples
    x = design.expand(n)
    t = dataset.treatments
    e = propensity.clipped_scores
    # X_i^(h)' r_i for every observed (i, h)
    xr = np.einsum("nhmp,nhm->nhp", x, fit.residuals)
    term_inv_e = 2.0 * float(np.sum(t / e**2 * np.einsum("nhp,nhp->nh", xr, xr))) / n

    kwargs = {}
    if regime == IPW_ESTIMATED:
        g = propensity.gradients
        kwargs["lambda_w"] = np.einsum("nh,nhp,nhq->hpq", t / e**2, xr, g) / n
        kwargs["lambda_u"] = np.einsum("nh,nhp,nhq->hpq", t / e, xr, g) / n
        j = np.einsum("nh,nhq,nhr->qr", 1.0 / e, g, g) / n
        j_inv, singular = _invert_j(j, cond_threshold, strict)
        kwargs.update(term_J=j, j_singular=singular, _j_inv=j_inv)
    elif regime == DR:
        outcome = outcome or fit.outcome
        if outcome is None:
            raise ValueError("doubly robust plug-ins need an outcome fit")
        if outcome.per_arm:
            cm = arm_residual_means(outcome, design, fit.beta_hat)
        else:
            cm = np.broadcast_to(conditional_residual_means(outcome, design, fit.beta_hat)[:, None],
                                 x.shape[:3])
        u = np.einsum("nhmp,nhm->nhp", x, cm)  # X_i^(h)' E^[eps_i | z_i]
        u_sum = u.sum(axis=1)
        own = np.einsum("nhp,nhp->nh", u, u)
        kwargs.update(
            term_condmean_cross=float(np.sum(u_sum * u_sum)) / n,
            term_condmean_inv_e=float(np.sum(own / e)) / n,
            term_condmean_e=float(np.sum(np.einsum("nh,nhp->np", e, u) * u_sum)) / n,
            term_condmean_own=float(np.sum(own)) / n,
        )
    elif regime != IPW_KNOWN:
        raise ValueError(f"unknown regime {regime!r}")
    return PenaltyPlugins(regime=regime, term_inv_e=term_inv_e, **kwargs)


def _check(fit: EstimatorFit, plugins: PenaltyPlugins, regime: Optional[str]) -> str:
    regime = regime or fit.kind
    if plugins.regime != regime:
        raise ValueError(f"plug-ins were computed for {plugins.regime}, criterion requested for {regime}")
    return regime


def qicw(fit: EstimatorFit, sigma2: float, p: Optional[int] = None, regime: Optional[str] = None) -> CriterionReport:
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    p = fit.n_params if p is None else p
    return CriterionReport(fit.candidate_id, fit.n_params, QICW, regime or fit.kind, fit.weighted_rss, 2.0 * sigma2 * p)


def wcp(fit: EstimatorFit, plugins: PenaltyPlugins, regime: Optional[str] = None) -> CriterionReport:
    regime = _check(fit, plugins, regime)
    penalty = plugins.term_inv_e
    if regime == IPW_ESTIMATED:
        penalty -= plugins.correction(weighted=True)
    elif regime == DR:
        penalty += 2.0 * plugins.term_condmean_cross - 2.0 * plugins.term_condmean_inv_e
    return CriterionReport(fit.candidate_id, fit.n_params, WCP, regime, fit.weighted_rss, penalty)


def ucp(fit: EstimatorFit, plugins: PenaltyPlugins, sigma2: float, p: Optional[int] = None,
        regime: Optional[str] = None) -> CriterionReport:
    regime = _check(fit, plugins, regime)
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    p = fit.n_params if p is None else p
    penalty = 2.0 * sigma2 * p
    if regime == IPW_ESTIMATED:
        penalty -= plugins.correction(weighted=False)
    elif regime == DR:
        penalty += 2.0 * plugins.term_condmean_e - 2.0 * plugins.term_condmean_own
    return CriterionReport(fit.candidate_id, fit.n_params, UCP, regime, fit.masked_rss, penalty)


def wcp_conditional(fit: EstimatorFit, dataset: Dataset, design: DesignSet,
                    propensity: Optional[PropensityFit] = None,
                    plugins: Optional[PenaltyPlugins] = None) -> CriterionReport:
    """wCp whose penalty is the known-score plug-in evaluated at the estimated scores.

    This conditions on the estimated scores reproducing the observed arm
    frequencies, so no score-correction term is subtracted.
    """
    if fit.kind != IPW_ESTIMATED:
        raise ValueError("the conditional criterion applies to IPW with estimated propensity scores")
    if plugins is None:
        plugins = penalty_plugins(dataset, design, fit, propensity, regime=IPW_KNOWN)
    return CriterionReport(fit.candidate_id, fit.n_params, WCP_CONDITIONAL, IPW_ESTIMATED,
                           fit.weighted_rss, plugins.term_inv_e)


def estimate_sigma2(fit: EstimatorFit, n_samples: int) -> float:
    """IPW-weighted residual mean square ``weighted_rss / (N m - p)``."""
    m = fit.residuals.shape[-1]
    dof = n_samples * m - fit.n_params
    if dof <= 0:
        raise ValueError("not enough samples to estimate sigma2")
    return fit.weighted_rss / dof


def select(reports: Sequence[CriterionReport]):
    """Candidate with the smallest total; ties go to fewer parameters, then the smaller label."""
    if not reports:
        raise ValueError("no criterion reports to select from")
    kinds = {(r.criterion, r.regime) for r in reports}
    if len(kinds) > 1:
        raise ValueError(f"reports mix criteria/regimes: {sorted(kinds)}")
    best = min(reports, key=lambda r: (r.total, r.n_params, str(r.candidate_id)))
    return best.candidate_id
