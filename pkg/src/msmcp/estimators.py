"""Inverse-probability-weighted and doubly robust estimators of the structural coefficients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .design import Dataset, DesignSet, SingularDesignError
from .outcome import OutcomeFit
from .propensity import PropensityFit

IPW_KNOWN = "IPW_known"
IPW_ESTIMATED = "IPW_estimated"
DR = "DR"
REGIMES = (IPW_KNOWN, IPW_ESTIMATED, DR)

COND_THRESHOLD = 1e12


@dataclass(frozen=True)
class EstimatorFit:
    """Coefficient estimate plus the residual artifacts reused by the criteria.

    ``residuals[i, h]`` is ``y_i - X_i^(h) beta_hat``; it is only meaningful
    where ``t_i^(h) = 1`` and is zero elsewhere.
    """

    kind: str
    candidate_id: object
    beta_hat: np.ndarray
    weighted_rss: float
    masked_rss: float
    residuals: np.ndarray
    weights: np.ndarray
    propensity: PropensityFit
    outcome: Optional[OutcomeFit] = None

    @property
    def n_params(self) -> int:
        return self.beta_hat.shape[0]


def _solve(gram: np.ndarray, rhs: np.ndarray, candidate_id, threshold: float) -> np.ndarray:
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > threshold:
        raise SingularDesignError(
            f"candidate {candidate_id!r}: weighted Gram matrix is singular (condition number {cond:.3g})",
            candidate_id)
    return np.linalg.solve(gram, rhs)


def _finish(kind, dataset, design, x, beta, weights, propensity, outcome):
    t = dataset.treatments
    y = np.where(t.sum(axis=1, keepdims=True) > 0, dataset.outcomes, 0.0)
    resid = (y[:, None, :] - x @ beta) * t[:, :, None]
    sq = np.einsum("nhm,nhm->nh", resid, resid)
    return EstimatorFit(kind=kind, candidate_id=design.candidate_id, beta_hat=beta,
                        weighted_rss=float(np.sum(weights * sq)), masked_rss=float(np.sum(t * sq)),
                        residuals=resid, weights=weights, propensity=propensity, outcome=outcome)


def ipw_weights(dataset: Dataset, propensity: PropensityFit) -> np.ndarray:
    """``W`` diagonal ``t_i^(h) / e_i^(h)`` as an ``(N, H)`` array."""
    e = propensity.clipped_scores
    if e.shape != dataset.treatments.shape:
        raise ValueError(f"propensity scores {e.shape} do not match treatments {dataset.treatments.shape}")
    return dataset.treatments / e


def ipw_fit(dataset: Dataset, design: DesignSet, propensity: PropensityFit,
            kind: Optional[str] = None, cond_threshold: float = COND_THRESHOLD) -> EstimatorFit:
    """Weighted least squares with weights ``t/e``.

    ``kind`` defaults to ``IPW_known`` or ``IPW_estimated`` from the propensity mode.
    """
    if kind is None:
        kind = IPW_ESTIMATED if propensity.mode == "estimated" else IPW_KNOWN
    x = design.expand(dataset.n_samples)
    w = ipw_weights(dataset, propensity)
    y = np.where(dataset.treatments.sum(axis=1, keepdims=True) > 0, dataset.outcomes, 0.0)
    gram = np.einsum("nh,nhmp,nhmq->pq", w, x, x)
    rhs = np.einsum("nh,nhmp,nm->p", w, x, y)
    beta = _solve(gram, rhs, design.candidate_id, cond_threshold)
    return _finish(kind, dataset, design, x, beta, w, propensity, None)


def dr_fit(dataset: Dataset, design: DesignSet, propensity: PropensityFit, outcome: OutcomeFit,
           cond_threshold: float = COND_THRESHOLD) -> EstimatorFit:
    """Doubly robust estimator: IPW moment augmented by ``(I - W)`` times the outcome-model means."""
    if outcome is None:
        raise ValueError("doubly robust estimation needs an outcome fit")
    x = design.expand(dataset.n_samples)
    w = ipw_weights(dataset, propensity)
    if outcome.cond_means.shape != x.shape[:3]:
        raise ValueError("outcome fit does not match the design")
    y = np.where(dataset.treatments.sum(axis=1, keepdims=True) > 0, dataset.outcomes, 0.0)
    gram = np.einsum("nhmp,nhmq->pq", x, x)
    rhs = (np.einsum("nh,nhmp,nm->p", w, x, y)
           + np.einsum("nh,nhmp,nhm->p", 1.0 - w, x, outcome.cond_means))
    beta = _solve(gram, rhs, design.candidate_id, cond_threshold)
    return _finish(DR, dataset, design, x, beta, w, propensity, outcome)
