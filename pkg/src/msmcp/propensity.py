"""Multinomial-logit propensity scores: evaluation, maximum likelihood and gradients."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

DEFAULT_CLIP = 1e-6


class PropensityConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(message)
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class PropensityModel:
    """Linear multinomial-logit model ``eta^(h) = f(z)' alpha_h`` with one arm fixed at zero.

    Parameters
    ----------
    n_arms : int
        Number of treatment arms ``H``.
    features : sequence of int or callable
        Confounder columns used as features, or a callable mapping the ``(N, s)``
        confounder matrix to an ``(N, d)`` feature matrix.
    intercept : bool
        Prepend a constant feature.
    baseline_arm : int
        Arm whose coefficient block is fixed at zero.

    The coefficient vector stacks one ``d``-block per non-baseline arm in arm
    order, so ``q = (H - 1) d``.
    """

    n_arms: int
    features: Union[Sequence[int], Callable[[np.ndarray], np.ndarray]] = (0,)
    intercept: bool = False
    baseline_arm: int = 0

    def feature_matrix(self, confounders) -> np.ndarray:
        z = np.asarray(confounders, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if callable(self.features):
            f = np.asarray(self.features(z), dtype=float)
            if f.ndim == 1:
                f = f[:, None]
        else:
            f = z[:, list(self.features)]
        if self.intercept:
            f = np.column_stack([np.ones(z.shape[0]), f])
        return f

    def n_features(self, confounders) -> int:
        return self.feature_matrix(np.asarray(confounders)[:1]).shape[1]

    def n_params(self, confounders) -> int:
        return (self.n_arms - 1) * self.n_features(confounders)

    def coefficient_matrix(self, alpha, d: int) -> np.ndarray:
        """``(H, d)`` coefficients with a zero row for the baseline arm."""
        alpha = np.asarray(alpha, dtype=float).ravel()
        if alpha.size != (self.n_arms - 1) * d:
            raise ValueError(f"alpha has length {alpha.size}, expected {(self.n_arms - 1) * d}")
        coef = np.zeros((self.n_arms, d))
        others = [h for h in range(self.n_arms) if h != self.baseline_arm]
        coef[others] = alpha.reshape(self.n_arms - 1, d)
        return coef

    def linear_predictor(self, alpha, confounders) -> np.ndarray:
        f = self.feature_matrix(confounders)
        return f @ self.coefficient_matrix(alpha, f.shape[1]).T


def simulation_model(n_arms: int = 6) -> PropensityModel:
    """Shared confounder ``z_1``, arm-specific slope, no intercept, arm 1 as baseline."""
    return PropensityModel(n_arms=n_arms, features=(0,), intercept=False, baseline_arm=0)


@dataclass(frozen=True)
class PropensityFit:
    """Scores ``e_i^(h)`` and gradients ``de_i^(h)/dalpha`` at a parameter value.

    ``scores`` are the raw softmax probabilities; ``clipped_scores`` is what every
    division by a propensity uses.
    """

    alpha: np.ndarray
    scores: np.ndarray
    gradients: np.ndarray
    mode: str = "known"
    loglik: Optional[float] = None
    clip: float = DEFAULT_CLIP
    separated: bool = False
    n_iter: int = 0
    grad_norm: float = field(default=float("nan"))

    @property
    def clipped_scores(self) -> np.ndarray:
        return np.clip(self.scores, self.clip, 1.0 - self.clip)

    @property
    def n_params(self) -> int:
        return self.gradients.shape[-1]


def _softmax_and_jacobian(model: PropensityModel, alpha, f: np.ndarray):
    eta = f @ model.coefficient_matrix(alpha, f.shape[1]).T
    if not np.all(np.isfinite(eta)):
        raise FloatingPointError("non-finite linear predictor in propensity model")
    log_e = eta - logsumexp(eta, axis=1, keepdims=True)
    e = np.exp(log_e)
    n, n_arms = e.shape
    d = f.shape[1]
    # de_h / dcoef_k = e_h (1[h == k] - e_k) f
    jac = (e[:, :, None] * (np.eye(n_arms)[None] - e[:, None, :]))  # (N, H, K)
    others = [k for k in range(n_arms) if k != model.baseline_arm]
    grads = jac[:, :, others, None] * f[:, None, None, :]
    return e, log_e, grads.reshape(n, n_arms, len(others) * d)


def evaluate_scores(model: PropensityModel, alpha, confounders, clip: float = DEFAULT_CLIP) -> PropensityFit:
    """Propensity scores and their analytic gradients at a known ``alpha``."""
    alpha = np.asarray(alpha, dtype=float).ravel()
    if not np.all(np.isfinite(alpha)):
        raise FloatingPointError("alpha must be finite")
    f = model.feature_matrix(confounders)
    e, _, grads = _softmax_and_jacobian(model, alpha, f)
    return PropensityFit(alpha=alpha, scores=e, gradients=grads, mode="known", clip=clip,
                         separated=bool(np.any((e < clip) | (e > 1 - clip))))


def log_likelihood(model: PropensityModel, alpha, treatments, confounders) -> float:
    f = model.feature_matrix(confounders)
    eta = f @ model.coefficient_matrix(alpha, f.shape[1]).T
    t = np.asarray(treatments, dtype=float)
    return float(np.sum(t * eta) - np.sum(logsumexp(eta, axis=1)))


def _score_and_hessian(model, alpha, t, f):
    e, log_e, grads = _softmax_and_jacobian(model, alpha, f)
    ll = float(np.sum(t * log_e))
    others = [k for k in range(model.n_arms) if k != model.baseline_arm]
    resid = (t - e)[:, others]  # (N, K-1)
    d = f.shape[1]
    score = np.einsum("nk,nd->kd", resid, f).ravel()
    # observed information of the multinomial logit: sum_i (diag(e) - e e') kron f f'
    es = e[:, others]
    cov = np.einsum("nk,kl->nkl", es, np.eye(len(others))) - es[:, :, None] * es[:, None, :]
    info = np.einsum("nkl,nd,nc->kdlc", cov, f, f).reshape(len(others) * d, len(others) * d)
    return ll, score, info, e, grads


def fit_mle(
    model: PropensityModel,
    treatments,
    confounders,
    init=None,
    clip: float = DEFAULT_CLIP,
    max_iter: int = 200,
    tol: float = 1e-8,
) -> PropensityFit:
    """Maximum likelihood for the multinomial logit by damped Newton-Raphson.

    Step halving keeps the log-likelihood monotone; a singular information
    matrix falls back to a gradient-ascent step.  Convergence requires
    ``||score|| <= tol * max(1, |loglik|)``.
    """
    t = np.asarray(treatments, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    f = model.feature_matrix(confounders)
    q = (model.n_arms - 1) * f.shape[1]
    if t.shape[1] != model.n_arms:
        raise ValueError(f"treatments have {t.shape[1]} arms, model expects {model.n_arms}")
    missing_arms = np.flatnonzero(t.sum(axis=0) == 0)
    if missing_arms.size:
        raise ValueError(f"treatment arms never observed: {missing_arms.tolist()}")
    if t.shape[0] <= q:
        raise ValueError(f"need more samples than propensity parameters ({t.shape[0]} <= {q})")

    alpha = np.zeros(q) if init is None else np.asarray(init, dtype=float).ravel().copy()
    ll, score, info, e, grads = _score_and_hessian(model, alpha, t, f)
    gnorm = float(np.linalg.norm(score))
    it = 0
    while gnorm > tol * max(1.0, abs(ll)) and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(info, score)
            if not np.all(np.isfinite(step)) or step @ score <= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = score / max(1.0, np.abs(info).max())
        scale = 1.0
        for _ in range(60):
            cand = alpha + scale * step
            try:
                new = _score_and_hessian(model, cand, t, f)
            except FloatingPointError:
                new = None
            if new is not None and new[0] >= ll - 1e-12 * abs(ll):
                break
            scale *= 0.5
        else:
            break
        alpha = cand
        ll, score, info, e, grads = new
        gnorm = float(np.linalg.norm(score))

    separated = bool(np.any((e < clip) | (e > 1 - clip)))
    converged = gnorm <= tol * max(1.0, abs(ll))
    if not converged and not separated:
        raise PropensityConvergenceError(
            f"propensity MLE did not converge after {it} iterations (|score|={gnorm:.3g})", gnorm)
    if separated:
        state = "converged" if converged else f"did not converge (|score|={gnorm:.3g})"
        warnings.warn(f"propensity MLE {state} with scores beyond the clip bound (separation)", RuntimeWarning)
    return PropensityFit(alpha=alpha, scores=e, gradients=grads, mode="estimated", loglik=ll, clip=clip,
                         separated=separated, n_iter=it, grad_norm=gnorm)


def standard_errors(model: PropensityModel, fit: PropensityFit, treatments, confounders) -> np.ndarray:
    """Standard errors of ``alpha`` from the inverse observed information."""
    t = np.asarray(treatments, dtype=float)
    f = model.feature_matrix(confounders)
    info = _score_and_hessian(model, fit.alpha, t, f)[2]
    return np.sqrt(np.diag(np.linalg.inv(info)))


def score_gradient_check(fit: PropensityFit, model: PropensityModel, confounders, step: float = 1e-6) -> float:
    """Largest deviation between analytic gradients and central finite differences.

    The deviation is reported relative to the largest finite-difference gradient
    entry, floored at one so that near-zero gradients are compared absolutely.
    """
    alpha = np.asarray(fit.alpha, dtype=float)
    fd = np.empty_like(fit.gradients)
    for j in range(alpha.size):
        da = np.zeros_like(alpha)
        da[j] = step
        up = evaluate_scores(model, alpha + da, confounders).scores
        down = evaluate_scores(model, alpha - da, confounders).scores
        fd[:, :, j] = (up - down) / (2 * step)
    if not fd.size:
        return 0.0
    scale = max(float(np.abs(fd).max()), 1.0)
    return float(np.abs(fit.gradients - fd).max() / scale)
