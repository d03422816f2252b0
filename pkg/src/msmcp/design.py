"""Data containers for the marginal structural model and orthonormal candidate designs.

Arrays follow one layout throughout the package:

* treatments ``T``      -- ``(N, H)``
* confounders ``Z``     -- ``(N, s)``
* outcomes ``Y``        -- ``(N, m)``
* designs ``X``         -- ``(N, H, m, p)`` (or ``(H, m, p)`` when shared by all samples)
* true means            -- ``(N, H, m)``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Optional

import numpy as np


class DataValidationError(ValueError):
    """Raised when a dataset violates its shape or indicator invariants."""


class SingularDesignError(np.linalg.LinAlgError):
    """Raised when a candidate design does not have full column rank."""

    def __init__(self, message: str, candidate_id: Hashable = None):
        super().__init__(message)
        self.candidate_id = candidate_id


def _as_2d(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DataValidationError(f"{name} must be a 1-D or 2-D array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Dataset:
    """Observed data for ``N`` samples and ``H`` treatment arms.

    With ``H >= 2`` every treatment row must contain exactly one 1.  With a single
    arm the indicator column is the observation indicator of a missing-data problem
    (``t = 1`` observed, ``t = 0`` missing); ``t == 1`` everywhere is full observation.
    """

    treatments: np.ndarray
    confounders: np.ndarray
    outcomes: np.ndarray
    true_means: Optional[np.ndarray] = None

    def __post_init__(self):
        t = _as_2d(self.treatments, "treatments")
        z = _as_2d(self.confounders, "confounders")
        y = _as_2d(self.outcomes, "outcomes")
        if not np.all((t == 0) | (t == 1)):
            raise DataValidationError("treatments must be binary")
        if t.shape[1] >= 2:
            bad = np.flatnonzero(t.sum(axis=1) != 1)
            if bad.size:
                raise DataValidationError(
                    f"treatment rows must sum to 1; offending rows {bad[:10].tolist()}"
                )
        n = t.shape[0]
        if z.shape[0] != n or y.shape[0] != n:
            raise DataValidationError(
                f"row counts disagree: treatments {n}, confounders {z.shape[0]}, outcomes {y.shape[0]}"
            )
        mu = None
        if self.true_means is not None:
            mu = np.asarray(self.true_means, dtype=float)
            if mu.ndim == 2:
                mu = mu[:, :, None]
            if mu.shape != (n, t.shape[1], y.shape[1]):
                raise DataValidationError(f"true_means must have shape {(n, t.shape[1], y.shape[1])}")
        # observed outcomes of unobserved rows may be NaN in missing-data mode
        observed = t.sum(axis=1) > 0
        if not np.all(np.isfinite(y[observed])):
            raise DataValidationError("observed outcomes must be finite")
        for name, val in (("treatments", t), ("confounders", z), ("outcomes", y), ("true_means", mu)):
            if val is not None:
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_samples(self) -> int:
        return self.treatments.shape[0]

    @property
    def n_treatments(self) -> int:
        return self.treatments.shape[1]

    @property
    def outcome_dim(self) -> int:
        return self.outcomes.shape[1]

    @property
    def arms(self) -> np.ndarray:
        """Index of the received arm per sample (``-1`` for unobserved rows)."""
        t = self.treatments
        return np.where(t.sum(axis=1) > 0, t.argmax(axis=1), -1)


@dataclass(frozen=True)
class DesignSet:
    """Candidate design ``X_i^(h)`` with the basis transform that produced it.

    ``designs`` is either ``(H, m, p)`` (same for every sample, as in polynomial
    designs over arm values) or ``(N, H, m, p)``.
    """

    candidate_id: Hashable
    designs: np.ndarray
    transform: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.asarray(self.designs, dtype=float)
        if x.ndim == 2:
            x = x[:, None, :]
        if x.ndim not in (3, 4):
            raise DataValidationError(f"designs must be (H, m, p) or (N, H, m, p), got {x.shape}")
        x.setflags(write=False)
        object.__setattr__(self, "designs", x)
        a = np.eye(x.shape[-1]) if self.transform is None else np.asarray(self.transform, dtype=float)
        if a.shape != (x.shape[-1], x.shape[-1]) or not np.isfinite(np.linalg.cond(a)):
            raise SingularDesignError(f"transform of candidate {self.candidate_id!r} is not invertible", self.candidate_id)
        object.__setattr__(self, "transform", a)

    @property
    def n_params(self) -> int:
        return self.designs.shape[-1]

    @property
    def shared(self) -> bool:
        return self.designs.ndim == 3

    def expand(self, n_samples: int) -> np.ndarray:
        """Return the ``(N, H, m, p)`` design tensor (a broadcast view when shared)."""
        if self.shared:
            return np.broadcast_to(self.designs, (n_samples,) + self.designs.shape)
        if self.designs.shape[0] != n_samples:
            raise DataValidationError(
                f"design of candidate {self.candidate_id!r} has {self.designs.shape[0]} samples, expected {n_samples}"
            )
        return self.designs


@dataclass(frozen=True)
class TrueParams:
    beta: np.ndarray
    sigma2: float
    alpha: np.ndarray
    b_coeffs: np.ndarray

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")


def build_orthonormal_design(raw_rows, candidate_id: Hashable = None) -> DesignSet:
    """Orthonormalize per-arm rows so that ``sum_h X^(h)' X^(h) = I``.

    Parameters
    ----------
    raw_rows : array_like, shape (H, p) or (H, m, p)
        Raw regressors ``v^(h)`` per treatment arm.
    candidate_id : hashable, optional
        Label used in error messages and reports.

    Returns
    -------
    DesignSet
        ``X^(h) = v^(h) A^{-1}`` where ``A`` is the upper-triangular factor with
        positive diagonal such that ``A'A = sum_h v^(h)' v^(h)``.

    Notes
    -----
    ``A`` is obtained from a QR decomposition of the stacked rows rather than a
    Cholesky factorization of the Gram matrix.  Both give the same factor but the
    QR route avoids squaring the condition number of Vandermonde-type bases.
    """
    v = np.asarray(raw_rows, dtype=float)
    if v.ndim == 2:
        v = v[:, None, :]
    n_arms, m, p = v.shape
    stacked = v.reshape(n_arms * m, p)
    if stacked.shape[0] < p:
        raise SingularDesignError(
            f"candidate {candidate_id!r}: {stacked.shape[0]} rows cannot span {p} parameters", candidate_id
        )
    q, r = np.linalg.qr(stacked)
    sign = np.sign(np.diag(r))
    sign[sign == 0] = 1.0
    r = sign[:, None] * r
    q = q * sign[None, :]
    d = np.abs(np.diag(r))
    if d.min() <= 1e-12 * max(d.max(), 1.0):
        raise SingularDesignError(
            f"candidate {candidate_id!r}: Gram matrix of the raw design is not positive definite", candidate_id
        )
    return DesignSet(candidate_id=candidate_id, designs=q.reshape(n_arms, m, p), transform=r)


def polynomial_rows(order: int, arm_values) -> np.ndarray:
    """Rows ``(1, x, ..., x^order)`` for each arm value ``x``."""
    x = np.asarray(arm_values, dtype=float)
    return np.vander(x, order + 1, increasing=True)


def polynomial_design(order: int, arm_values) -> DesignSet:
    return build_orthonormal_design(polynomial_rows(order, arm_values), candidate_id=order)


def map_coefficients(raw_coeffs, transform) -> np.ndarray:
    """Map raw-basis coefficients ``b`` to the orthonormal basis, ``beta = A b``."""
    b = np.asarray(raw_coeffs, dtype=float)
    a = np.asarray(transform, dtype=float)
    if a.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"coefficient length {b.shape[0]} does not match transform {a.shape}")
    return a @ b


def gram_deviation(design: DesignSet) -> float:
    """``max |sum_h X^(h)' X^(h) - I|`` averaged over samples."""
    x = design.designs
    if design.shared:
        g = np.einsum("hmp,hmq->pq", x, x)
    else:
        g = np.einsum("nhmp,nhmq->pq", x, x) / x.shape[0]
    return float(np.abs(g - np.eye(design.n_params)).max())
