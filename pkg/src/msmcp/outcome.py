"""Gaussian linear outcome regression used by the doubly robust estimator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .design import Dataset, DesignSet


class SingularFitError(np.linalg.LinAlgError):
    def __init__(self, message: str, columns: Sequence[str] = ()):
        super().__init__(message)
        self.columns = list(columns)


@dataclass(frozen=True)
class OutcomeFit:
    """Pooled least-squares fit of ``E[y^(h) | z]`` on design columns and confounder features.

    ``cond_means`` has shape ``(N, H, m)`` and covers unobserved arms too.
    """

    gamma: np.ndarray
    cond_means: np.ndarray
    features: tuple
    candidate_id: object = None
    misspecified: bool = False
    columns: tuple = ()
    per_arm: bool = False


def _regressors(x: np.ndarray, z: np.ndarray, features: tuple) -> np.ndarray:
    """``(N, H, m, p + m*d)`` regressor tensor ``[X_i^(h), I_m kron f(z_i)]``."""
    n, n_arms, m, p = x.shape
    f = z[:, list(features)] if features else np.zeros((n, 0))
    block = np.einsum("jk,nd->njkd", np.eye(m), f).reshape(n, m, m * f.shape[1])
    block = np.broadcast_to(block[:, None], (n, n_arms, m, block.shape[-1]))
    return np.concatenate([x, block], axis=-1)


def fit_outcome(dataset: Dataset, design: DesignSet, features: Sequence[int] = (0,),
                misspecified: bool = False) -> OutcomeFit:
    """Fit the outcome model by least squares over the observed ``(i, h)`` pairs.

    Parameters
    ----------
    features : sequence of int
        Confounder columns entering linearly.  An empty tuple drops every
        confounder (the deliberately misspecified model).
    misspecified : bool
        Recorded on the fit so downstream reports can flag it.
    """
    features = tuple(features)
    x = design.expand(dataset.n_samples)
    m = dataset.outcome_dim
    reg = _regressors(x, dataset.confounders, features)
    obs_i, obs_h = np.nonzero(dataset.treatments)
    a = reg[obs_i, obs_h].reshape(-1, reg.shape[-1])
    yv = dataset.outcomes[obs_i].reshape(-1)
    columns = tuple([f"x_{j + 1}" for j in range(design.n_params)]
                    + [f"z_{c + 1}" + (f"[y_{k + 1}]" if m > 1 else "") for k in range(m) for c in features])
    if a.shape[0] <= a.shape[1]:
        raise SingularFitError(f"outcome regression has {a.shape[0]} rows for {a.shape[1]} columns", columns)
    _, r, piv = scipy.linalg.qr(a, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    rank = int(np.sum(d > 1e-10 * d[0])) if d.size else 0
    if rank < a.shape[1]:
        bad = [columns[j] for j in piv[rank:]]
        raise SingularFitError(f"outcome regression is rank deficient; collinear columns {bad}", bad)
    gamma = np.linalg.lstsq(a, yv, rcond=None)[0]
    cond_means = reg @ gamma
    return OutcomeFit(gamma=gamma, cond_means=cond_means, features=features, candidate_id=design.candidate_id,
                      misspecified=misspecified, columns=columns)


def fit_outcome_per_arm(dataset: Dataset, design: DesignSet, features: Sequence[int] = (0,),
                        misspecified: bool = False) -> OutcomeFit:
    """Separate least-squares fit ``y ~ 1 + f(z)`` within each arm.

    The arm-specific intercept absorbs a design that is constant within the arm,
    so ``design`` only labels the fit.  ``gamma`` is ``(H, m, 1 + d)``.
    """
    features = tuple(features)
    z = dataset.confounders
    n, m = dataset.n_samples, dataset.outcome_dim
    f = np.column_stack([np.ones(n), z[:, list(features)]]) if features else np.ones((n, 1))
    columns = ("intercept",) + tuple(f"z_{c + 1}" for c in features)
    gamma = np.empty((dataset.n_treatments, m, f.shape[1]))
    for h in range(dataset.n_treatments):
        obs = dataset.treatments[:, h] == 1
        a = f[obs]
        if a.shape[0] <= a.shape[1] or np.linalg.matrix_rank(a) < a.shape[1]:
            raise SingularFitError(f"outcome regression for arm {h} is rank deficient", columns)
        gamma[h] = np.linalg.lstsq(a, dataset.outcomes[obs], rcond=None)[0].T
    cond_means = np.einsum("nd,hmd->nhm", f, gamma)
    return OutcomeFit(gamma=gamma, cond_means=cond_means, features=features, candidate_id=design.candidate_id,
                      misspecified=misspecified, columns=columns, per_arm=True)


def arm_residual_means(fit: OutcomeFit, design: DesignSet, beta) -> np.ndarray:
    """``E^[y_i^(h) | z_i] - X_i^(h) beta`` for every arm, shape ``(N, H, m)``."""
    beta = np.asarray(beta, dtype=float)
    n = fit.cond_means.shape[0]
    x = design.expand(n)
    if x.shape[:3] != fit.cond_means.shape or beta.shape != (x.shape[-1],):
        raise ValueError("outcome fit, design and beta dimensions disagree")
    return fit.cond_means - x @ beta


def conditional_residual_means(fit: OutcomeFit, design: DesignSet, beta) -> np.ndarray:
    """Estimate ``E[eps_i | z_i]`` as the arm average of ``E^[y_i^(h) | z_i] - X_i^(h) beta``."""
    return arm_residual_means(fit, design, beta).mean(axis=1)
