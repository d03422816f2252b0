"""Monte Carlo study of the selection criteria on the polynomial dose-response design.

Each replication draws ``z_1 ~ U(-sqrt3, sqrt3)``, ``eps = z_1 + N(0, sigma2 - 1)``,
treatments from the softmax propensity ``e^(h) ~ exp(1[h > 1] alpha_{h-1} z_1)``
and outcomes ``y^(h) = 1 + h + b h^2 + eps``.  Candidate models are the
orthonormalized polynomials of orders ``0..5`` in the arm value ``h``.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .criteria import CRITERIA, QICW, UCP, WCP, WCP_CONDITIONAL, penalty_plugins, qicw, select, ucp, wcp, \
    wcp_conditional
from .design import Dataset, DesignSet, TrueParams, map_coefficients, polynomial_design
from .estimators import DR, IPW_ESTIMATED, IPW_KNOWN, REGIMES, EstimatorFit, dr_fit, ipw_fit
from .outcome import fit_outcome, fit_outcome_per_arm
from .propensity import PropensityModel, evaluate_scores, fit_mle, simulation_model

log = logging.getLogger(__name__)

TRUE_ORDER = 2


class StudyAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class StudyConfig:
    H: int = 6
    N: Tuple[int, ...] = (100, 200)
    b: Tuple[float, ...] = (0.5, 0.3, 0.1)
    alpha_true: Tuple[float, ...] = (0.8, 1.0, 0.9, 0.7, 0.6)
    sigma2: float = 2.0
    replications: int = 5000
    orders: Tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    regimes: Tuple[str, ...] = REGIMES
    criteria: Tuple[str, ...] = CRITERIA
    outcome_drop_z: bool = False
    propensity_wrong: bool = False
    outcome_model: str = "per_arm"
    master_seed: int = 0
    threads: int = 1
    max_failure_rate: float = 0.01

    def __post_init__(self):
        for name in ("N", "b", "alpha_true", "orders", "regimes", "criteria"):
            val = getattr(self, name)
            if isinstance(val, (int, float, str)):
                val = (val,)
            object.__setattr__(self, name, tuple(val))
        self.validate()

    def validate(self):
        errors = []
        if self.H < 2:
            errors.append("H must be at least 2")
        if not self.N or any(int(n) != n or n <= 0 for n in self.N):
            errors.append("N must be positive integers")
        if not self.b:
            errors.append("b must not be empty")
        if len(self.alpha_true) != self.H - 1:
            errors.append(f"alpha_true must have H-1={self.H - 1} entries")
        if not self.sigma2 > 1:
            errors.append("sigma2 must exceed 1 (the confounder contributes unit variance)")
        if int(self.replications) != self.replications or self.replications <= 0:
            errors.append("replications must be a positive integer")
        if not self.orders or any(o < 0 or o >= self.H for o in self.orders) or len(set(self.orders)) != len(self.orders):
            errors.append(f"orders must be distinct integers in [0, {self.H - 1}]")
        if not self.regimes or any(r not in REGIMES for r in self.regimes):
            errors.append(f"regimes must be a non-empty subset of {list(REGIMES)}")
        if not self.criteria or any(c not in CRITERIA for c in self.criteria):
            errors.append(f"criteria must be a non-empty subset of {list(CRITERIA)}")
        if self.outcome_model not in ("per_arm", "pooled"):
            errors.append("outcome_model must be 'per_arm' or 'pooled'")
        if self.threads < 1:
            errors.append("threads must be at least 1")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def arm_values(self) -> np.ndarray:
        return np.arange(1, self.H + 1, dtype=float)


@dataclass
class StudyTables:
    table1: pd.DataFrame
    selection: pd.DataFrame
    errors: pd.DataFrame
    records: pd.DataFrame
    metadata: Dict = field(default_factory=dict)


def replication_seed(master_seed: int, rep_index: int) -> np.random.SeedSequence:
    """Independent stream per replication, independent of execution order."""
    return np.random.SeedSequence([int(master_seed), int(rep_index)])


def candidate_designs(config: StudyConfig) -> Dict[int, DesignSet]:
    return {o: polynomial_design(o, config.arm_values) for o in config.orders}


def true_means(config: StudyConfig, b: float) -> np.ndarray:
    h = config.arm_values
    return 1.0 + h + b * h**2


def generate_replication(config: StudyConfig, rep_index: int, n: int, b: float) -> Tuple[Dataset, TrueParams]:
    rng = np.random.default_rng(replication_seed(config.master_seed, rep_index))
    z = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=n)
    noise = rng.normal(0.0, np.sqrt(config.sigma2 - 1.0), size=n)
    u = rng.uniform(size=n)
    model = simulation_model(config.H)
    e = evaluate_scores(model, config.alpha_true, z[:, None]).scores
    arm = np.minimum((np.cumsum(e, axis=1) < u[:, None]).sum(axis=1), config.H - 1)
    t = np.zeros((n, config.H))
    t[np.arange(n), arm] = 1.0
    mu = np.broadcast_to(true_means(config, b), (n, config.H))
    y = mu[np.arange(n), arm] + z + noise
    data = Dataset(treatments=t, confounders=z[:, None], outcomes=y[:, None], true_means=mu[:, :, None])
    raw = np.array([1.0, 1.0, b])
    a = polynomial_design(TRUE_ORDER, config.arm_values).transform
    truth = TrueParams(beta=map_coefficients(raw, a), sigma2=config.sigma2, alpha=np.asarray(config.alpha_true),
                       b_coeffs=raw)
    return data, truth


def _fitted_means(fit: EstimatorFit, design: DesignSet, n: int) -> np.ndarray:
    return design.expand(n) @ fit.beta_hat


def oracle_wse(fit: EstimatorFit, design: DesignSet, true_means: np.ndarray) -> float:
    """Weighted squared error ``sum_h (X beta_hat - mu^(h))' W^(h) (X beta_hat - mu^(h))``."""
    if true_means is None:
        raise ValueError("true means are required")
    d = _fitted_means(fit, design, true_means.shape[0]) - true_means
    return float(np.sum(fit.weights * np.einsum("nhm,nhm->nh", d, d)))


def oracle_use(fit: EstimatorFit, design: DesignSet, true_means: np.ndarray) -> float:
    """Unweighted squared error over observed arms."""
    if true_means is None:
        raise ValueError("true means are required")
    d = _fitted_means(fit, design, true_means.shape[0]) - true_means
    return float(np.sum((fit.weights > 0) * np.einsum("nhm,nhm->nh", d, d)))


def mce_penalty(fit: EstimatorFit, dataset: Dataset, design: DesignSet, beta_true, weighting: str = "W") -> float:
    """Per-replication value of ``2 sum_h (y - mu^(h))' V^(h) X^(h) (beta_hat - beta)`` with ``V = W`` or ``T``."""
    if dataset.true_means is None:
        raise ValueError("true means are required")
    if weighting not in ("W", "T"):
        raise ValueError("weighting must be 'W' or 'T'")
    w = fit.weights if weighting == "W" else dataset.treatments
    x = design.expand(dataset.n_samples)
    dev = x @ (fit.beta_hat - np.asarray(beta_true, dtype=float))  # (N, H, m)
    err = dataset.outcomes[:, None, :] - dataset.true_means
    return 2.0 * float(np.sum(w * np.einsum("nhm,nhm->nh", err, dev)))


def _propensity(config: StudyConfig, regime: str, data: Dataset):
    if regime == IPW_KNOWN:
        return evaluate_scores(simulation_model(config.H), config.alpha_true, data.confounders)
    if config.propensity_wrong:
        model = PropensityModel(n_arms=config.H, features=(), intercept=True)
    else:
        model = simulation_model(config.H)
    return fit_mle(model, data.treatments, data.confounders)


def evaluate_candidates(config: StudyConfig, regime: str, data: Dataset, designs: Dict[int, DesignSet],
                        propensity=None) -> Dict[int, dict]:
    """Fit every candidate under one regime and compute all requested criteria.

    Returns ``{order: {"fit", "plugins", "reports": {criterion: CriterionReport}}}``.
    """
    if propensity is None:
        propensity = _propensity(config, regime, data)
    out = {}
    for order, design in designs.items():
        if regime == DR:
            features = () if config.outcome_drop_z else (0,)
            fitter = fit_outcome_per_arm if config.outcome_model == "per_arm" else fit_outcome
            outcome = fitter(data, design, features=features, misspecified=config.outcome_drop_z)
            fit = dr_fit(data, design, propensity, outcome)
        else:
            fit = ipw_fit(data, design, propensity, kind=regime)
        plugins = penalty_plugins(data, design, fit, regime=regime)
        reports = {}
        for crit in config.criteria:
            if crit == QICW:
                reports[crit] = qicw(fit, config.sigma2)
            elif crit == WCP:
                reports[crit] = wcp(fit, plugins)
            elif crit == UCP:
                reports[crit] = ucp(fit, plugins, config.sigma2)
            elif crit == WCP_CONDITIONAL and regime == IPW_ESTIMATED:
                reports[crit] = wcp_conditional(fit, data, design)
        out[order] = {"fit": fit, "plugins": plugins, "reports": reports}
    return out


def run_replication(config: StudyConfig, n: int, b: float, rep_index: int,
                    designs: Optional[Dict[int, DesignSet]] = None) -> List[dict]:
    """One replication of one ``(b, N)`` cell: a record per (regime, criterion)."""
    designs = designs or candidate_designs(config)
    data, truth = generate_replication(config, rep_index, n, b)
    rows = []
    for regime in config.regimes:
        base = {"regime": regime, "b": b, "N": n, "rep": rep_index}
        try:
            cands = evaluate_candidates(config, regime, data, designs)
        except (np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
            log.debug("replication %d (%s, b=%s, N=%d) failed: %s", rep_index, regime, b, n, exc)
            for crit in config.criteria:
                if crit != WCP_CONDITIONAL or regime == IPW_ESTIMATED:
                    rows.append({**base, "criterion": crit, "failed": True})
            continue
        true_c = cands.get(TRUE_ORDER)
        for crit in config.criteria:
            if crit == WCP_CONDITIONAL and regime != IPW_ESTIMATED:
                continue
            chosen = select([c["reports"][crit] for c in cands.values()])
            fit = cands[chosen]["fit"]
            row = {**base, "criterion": crit, "failed": False, "selected": chosen,
                   "WSE": oracle_wse(fit, designs[chosen], data.true_means),
                   "USE": oracle_use(fit, designs[chosen], data.true_means)}
            if true_c is not None and crit in (WCP, UCP):
                weighting = "W" if crit == WCP else "T"
                row["MCE"] = mce_penalty(true_c["fit"], data, designs[TRUE_ORDER], truth.beta, weighting)
                row["AE"] = true_c["reports"][crit].penalty
            rows.append(row)
    return rows


def _run_chunk(args):
    config, reps = args
    designs = candidate_designs(config)
    rows = []
    for n in config.N:
        for b in config.b:
            for rep in reps:
                rows.extend(run_replication(config, n, b, rep, designs))
    return rows


def _chunks(n_reps: int, n_chunks: int) -> List[range]:
    bounds = np.linspace(0, n_reps, n_chunks + 1).astype(int)
    return [range(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def run_study(config: StudyConfig) -> StudyTables:
    """Run every replication and aggregate the penalty, error and selection tables.

    Results do not depend on ``threads``: each replication owns its random
    stream and records are sorted by index before aggregation.
    """
    start = time.perf_counter()
    if config.threads > 1:
        chunks = _chunks(config.replications, config.threads * 4)
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            parts = list(pool.map(_run_chunk, [(config, c) for c in chunks]))
        rows = [r for part in parts for r in part]
    else:
        rows = _run_chunk((config, range(config.replications)))

    records = pd.DataFrame(rows)
    key = ["regime", "b", "N", "criterion"]
    order_r = {r: i for i, r in enumerate(config.regimes)}
    order_c = {c: i for i, c in enumerate(config.criteria)}
    records = (records.assign(_r=records["regime"].map(order_r), _c=records["criterion"].map(order_c))
               .sort_values(["_r", "b", "N", "_c", "rep"], ascending=[True, False, True, True, True],
                            kind="mergesort")
               .drop(columns=["_r", "_c"]).reset_index(drop=True))
    for col in ("selected", "WSE", "USE", "MCE", "AE"):
        if col not in records:
            records[col] = np.nan

    fail = records.groupby(key, sort=False)["failed"].mean()
    if (fail > config.max_failure_rate).any():
        worst = fail.idxmax()
        raise StudyAbort(f"failure rate {fail.max():.2%} exceeds {config.max_failure_rate:.0%} in cell {worst}")

    ok = records[~records["failed"]]
    grouped = ok.groupby(key, sort=False)
    sel_rows, err_rows, t1_rows = [], [], []
    for (regime, b, n, crit), g in grouped:
        freq = {f"freq_p{o}": 100.0 * float(np.mean(g["selected"].to_numpy() == o)) for o in config.orders}
        sel_rows.append({"regime": regime, "b": b, "N": n, "criterion": crit, **freq})
        err_rows.append({"regime": regime, "b": b, "N": n, "criterion": crit,
                         "avg_WSE": float(g["WSE"].mean()), "avg_USE": float(g["USE"].mean()),
                         "se_WSE": float(g["WSE"].std(ddof=1) / np.sqrt(len(g))) if len(g) > 1 else float("nan"),
                         "n_ok": len(g)})
        if crit in (WCP, UCP) and TRUE_ORDER in config.orders:
            t1_rows.append({"regime": regime, "b": b, "N": n, "criterion": crit,
                            "MCE": float(g["MCE"].mean()), "AE": float(g["AE"].mean())})
    meta = {"master_seed": config.master_seed, "replications": config.replications,
            "wall_time_s": time.perf_counter() - start, "failures": int(records["failed"].sum())}
    return StudyTables(table1=pd.DataFrame(t1_rows, columns=["regime", "b", "N", "criterion", "MCE", "AE"]),
                       selection=pd.DataFrame(sel_rows), errors=pd.DataFrame(err_rows), records=records,
                       metadata=meta)
