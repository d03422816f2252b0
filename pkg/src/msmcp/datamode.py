"""Model selection on user-supplied data files.

Arm-level files have one row per ``(sample, arm)`` with columns ``sample_id``,
``arm``, ``t``, ``y_1..y_m``, ``z_1..z_s`` and optional ``x_1..x_p``.  Outcome and
confounder values are read from the row with ``t = 1``.  Missing-data files have
one row per sample with ``sample_id``, ``t``, ``y_1``, ``z_*`` and ``x_*``.

Selection specs are TOML documents; see ``SELECT_KEYS`` and ``MISSING_KEYS``.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .criteria import QICW, UCP, WCP, WCP_CONDITIONAL, estimate_sigma2, penalty_plugins, qicw, select, ucp, wcp, \
    wcp_conditional
from .design import Dataset, DataValidationError, DesignSet, build_orthonormal_design, polynomial_rows
from .estimators import DR, IPW_ESTIMATED, IPW_KNOWN, REGIMES, dr_fit, ipw_fit
from .missing import (MissingDataset, dr_missing, fit_missing_outcome, fit_missing_propensity, ipw_missing,
                      missing_plugins, missing_propensity, wcp_missing)
from .outcome import fit_outcome, fit_outcome_per_arm
from .propensity import PropensityModel, evaluate_scores, fit_mle

SELECT_KEYS = ("regimes", "criteria", "sigma2", "orders", "candidates", "propensity_features",
               "propensity_intercept", "alpha_known", "outcome_features", "outcome_model")
MISSING_KEYS = ("regimes", "candidates", "propensity_features", "propensity_intercept", "alpha_known",
                "outcome_features")
CRITERIA_COLUMNS = ["candidate", "n_params", "regime", "criterion", "gof", "penalty", "total", "selected", "failed"]


class SchemaError(ValueError):
    def __init__(self, message: str, columns=()):
        super().__init__(message)
        self.columns = list(columns)


def _numbered(columns, prefix: str) -> List[str]:
    pat = re.compile(rf"^{prefix}_(\d+)$")
    found = sorted((int(m.group(1)), c) for c in columns if (m := pat.match(c)))
    names = [c for _, c in found]
    if [i for i, _ in found] != list(range(1, len(found) + 1)):
        raise SchemaError(f"columns {prefix}_* must be numbered 1..k without gaps, got {names}", names)
    return names


def _read_table(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, comment="#", sep=None, engine="python")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise SchemaError(f"cannot read data file {path}: {exc}") from exc


def _require(df: pd.DataFrame, required: List[str]):
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"data file is missing required columns {missing}", missing)
    bad = [c for c in df.columns if not pd.api.types.is_numeric_dtype(df[c]) and c != "sample_id"]
    if bad:
        raise SchemaError(f"columns {bad} must be numeric", bad)


@dataclass(frozen=True)
class ArmTable:
    """Parsed arm-level file: the dataset plus per-(sample, arm) regressors."""

    dataset: Dataset
    sample_ids: np.ndarray
    arm_values: np.ndarray
    x: Optional[np.ndarray]  # (N, H, p) raw columns or None
    x_names: tuple


def read_arm_table(path) -> ArmTable:
    df = _read_table(path)
    _require(df, ["sample_id", "arm", "t", "y_1", "z_1"])
    y_cols, z_cols = _numbered(df.columns, "y"), _numbered(df.columns, "z")
    x_cols = _numbered(df.columns, "x")
    if len(y_cols) > 1 and x_cols:
        raise SchemaError("inline x columns describe one design row per arm and need a single outcome y_1", y_cols)
    if not df["t"].isin([0, 1]).all():
        raise SchemaError("column t must be 0 or 1", ["t"])
    ids = pd.unique(df["sample_id"])
    arms = np.sort(pd.unique(df["arm"]).astype(float))
    full = pd.MultiIndex.from_product([ids, arms], names=["sample_id", "arm"])
    df = df.assign(arm=df["arm"].astype(float))
    if df.duplicated(["sample_id", "arm"]).any():
        raise SchemaError("duplicate (sample_id, arm) rows", ["sample_id", "arm"])
    df = df.set_index(["sample_id", "arm"])
    if len(df) != len(full) or not df.index.isin(full).all():
        raise SchemaError("every sample needs exactly one row per arm", ["sample_id", "arm"])
    df = df.reindex(full)
    n, h = len(ids), len(arms)
    t = df["t"].to_numpy(float).reshape(n, h)
    if not np.all(t.sum(axis=1) == 1):
        raise SchemaError("each sample must have exactly one row with t = 1", ["t"])  # single arm: full observation
    obs = df[df["t"] == 1].reindex(pd.MultiIndex.from_arrays([ids, arms[t.argmax(axis=1)]]))
    y = obs[y_cols].to_numpy(float)
    z = obs[z_cols].to_numpy(float)
    x = df[x_cols].to_numpy(float).reshape(n, h, len(x_cols)) if x_cols else None
    if not np.all(np.isfinite(z)) or (x is not None and not np.all(np.isfinite(x))):
        raise SchemaError("confounder and design columns must be finite", z_cols + x_cols)
    try:
        data = Dataset(treatments=t, confounders=z, outcomes=y)
    except DataValidationError as exc:
        raise SchemaError(str(exc), y_cols) from exc
    return ArmTable(data, np.asarray(ids), arms, x, tuple(x_cols))


def read_spec(path, allowed) -> dict:
    try:
        spec = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise SchemaError(f"cannot read spec {path}: {exc}") from exc
    unknown = sorted(set(spec) - set(allowed))
    if unknown:
        raise SchemaError(f"unknown spec keys {unknown}; allowed keys are {list(allowed)}", unknown)
    return spec


def _z_columns(spec: dict, key: str, s: int, default) -> tuple:
    cols = spec.get(key, default)
    cols = list(range(1, s + 1)) if cols == "all" else list(cols)
    if any(not 1 <= c <= s for c in cols):
        raise SchemaError(f"{key} must list confounder columns in 1..{s}", [key])
    return tuple(c - 1 for c in cols)


def candidate_designs(table: ArmTable, spec: dict) -> Dict[str, object]:
    """Polynomial candidates over arm values (``orders``) and inline column subsets (``candidates``).

    Failed constructions map to the exception so they can be reported per row.
    """
    out: Dict[str, object] = {}
    for order in spec.get("orders", []):
        try:
            out[f"poly{order}"] = build_orthonormal_design(polynomial_rows(order, table.arm_values), f"poly{order}")
        except np.linalg.LinAlgError as exc:
            out[f"poly{order}"] = exc
    for name, cols in spec.get("candidates", {}).items():
        missing = [c for c in cols if c not in table.x_names]
        if missing:
            raise SchemaError(f"candidate {name!r} uses columns not in the data file: {missing}", missing)
        idx = [table.x_names.index(c) for c in cols]
        out[name] = DesignSet(name, table.x[:, :, None, idx])
    if not out:
        raise SchemaError("spec defines no candidates (set orders and/or candidates)", ["orders", "candidates"])
    return out


def _propensity(spec: dict, regime: str, data: Dataset):
    s = data.confounders.shape[1]
    model = PropensityModel(n_arms=data.n_treatments, features=_z_columns(spec, "propensity_features", s, "all"),
                            intercept=bool(spec.get("propensity_intercept", True)))
    if regime == IPW_KNOWN:
        if "alpha_known" not in spec:
            raise SchemaError("regime IPW_known needs alpha_known in the spec", ["alpha_known"])
        return evaluate_scores(model, spec["alpha_known"], data.confounders)
    return fit_mle(model, data.treatments, data.confounders)


def run_select(table: ArmTable, spec: dict) -> pd.DataFrame:
    """Criterion values for every (candidate, regime, criterion) with the selection flag."""
    data = table.dataset
    regimes = spec.get("regimes", [IPW_ESTIMATED, DR])
    criteria = spec.get("criteria", [QICW, WCP, UCP])
    bad = [r for r in regimes if r not in REGIMES] + [c for c in criteria if c not in (QICW, WCP, UCP, WCP_CONDITIONAL)]
    if bad:
        raise SchemaError(f"unknown regimes or criteria {bad}", bad)
    designs = candidate_designs(table, spec)
    feats = _z_columns(spec, "outcome_features", data.confounders.shape[1], "all")
    fitter = fit_outcome if spec.get("outcome_model", "per_arm") == "pooled" else fit_outcome_per_arm
    rows = []
    for regime in regimes:
        prop = _propensity(spec, regime, data)
        fits = {}
        for name, design in designs.items():
            if isinstance(design, Exception):
                fits[name] = design
                continue
            try:
                if regime == DR:
                    fit = dr_fit(data, design, prop, fitter(data, design, features=feats))
                else:
                    fit = ipw_fit(data, design, prop, kind=regime)
                fits[name] = (fit, design, penalty_plugins(data, design, fit, regime=regime))
            except np.linalg.LinAlgError as exc:
                fits[name] = exc
        ok = {k: v for k, v in fits.items() if not isinstance(v, Exception)}
        if "sigma2" in spec:
            sigma2 = float(spec["sigma2"])
        elif ok:
            largest = max(ok.values(), key=lambda v: v[0].n_params)[0]
            sigma2 = estimate_sigma2(largest, data.n_samples)
        for crit in criteria:
            if crit == WCP_CONDITIONAL and regime != IPW_ESTIMATED:
                continue
            reports = {}
            for name, (fit, design, plugins) in ok.items():
                if crit == QICW:
                    reports[name] = qicw(fit, sigma2)
                elif crit == WCP:
                    reports[name] = wcp(fit, plugins)
                elif crit == UCP:
                    reports[name] = ucp(fit, plugins, sigma2)
                else:
                    reports[name] = wcp_conditional(fit, data, design)
            chosen = select(list(reports.values())) if reports else None
            for name in designs:
                r = reports.get(name)
                if r is None:
                    rows.append({"candidate": name, "n_params": np.nan, "regime": regime, "criterion": crit,
                                 "gof": np.nan, "penalty": np.nan, "total": np.nan, "selected": False,
                                 "failed": True})
                else:
                    rows.append({"candidate": name, "n_params": r.n_params, "regime": regime, "criterion": crit,
                                 "gof": r.gof, "penalty": r.penalty, "total": r.total,
                                 "selected": name == chosen, "failed": False})
    return pd.DataFrame(rows, columns=CRITERIA_COLUMNS)


def read_missing_table(path) -> MissingDataset:
    df = _read_table(path)
    _require(df, ["sample_id", "t", "y_1", "z_1", "x_1"])
    if _numbered(df.columns, "y") != ["y_1"]:
        raise SchemaError("missing-data files take a single outcome column y_1", ["y_1"])
    if not df["t"].isin([0, 1]).all():
        bad = sorted(set(df["t"].dropna().unique()) - {0, 1})
        raise SchemaError(f"missing indicator t must be 0 or 1, found {bad}", ["t"])
    if df["sample_id"].duplicated().any():
        raise SchemaError("duplicate sample_id rows", ["sample_id"])
    z_cols, x_cols = _numbered(df.columns, "z"), _numbered(df.columns, "x")
    z, x = df[z_cols].to_numpy(float), df[x_cols].to_numpy(float)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(x))):
        raise SchemaError("confounder and design columns must be finite", z_cols + x_cols)
    t = df["t"].to_numpy(float)
    try:
        return MissingDataset(outcomes=df[["y_1"]].to_numpy(float), missing_indicator=t, confounders=z,
                              design=x[:, None, :])
    except DataValidationError as exc:
        raise SchemaError(str(exc), ["y_1"]) from exc


def run_missing(data: MissingDataset, spec: dict, x_names=None) -> pd.DataFrame:
    """wCp for every (candidate, regime) on a missing-data file."""
    p = data.n_params
    x_names = list(x_names or [f"x_{j + 1}" for j in range(p)])
    cands = spec.get("candidates", {"full": x_names})
    regimes = spec.get("regimes", [IPW_ESTIMATED, DR])
    bad = [r for r in regimes if r not in REGIMES]
    if bad:
        raise SchemaError(f"unknown regimes {bad}", bad)
    s = data.confounders.shape[1]
    pfeat = _z_columns(spec, "propensity_features", s, "all")
    ofeat = _z_columns(spec, "outcome_features", s, "all")
    intercept = bool(spec.get("propensity_intercept", True))
    rows = []
    for regime in regimes:
        if regime == IPW_KNOWN:
            if "alpha_known" not in spec:
                raise SchemaError("regime IPW_known needs alpha_known in the spec", ["alpha_known"])
            prop = missing_propensity(spec["alpha_known"], data.confounders, pfeat, intercept)
        else:
            prop = fit_missing_propensity(data.missing_indicator, data.confounders, pfeat, intercept)
        reports = {}
        for name, cols in cands.items():
            missing = [c for c in cols if c not in x_names]
            if missing:
                raise SchemaError(f"candidate {name!r} uses columns not in the data file: {missing}", missing)
            sub = data.with_design(data.design[:, :, [x_names.index(c) for c in cols]], name)
            try:
                if regime == DR:
                    fit = dr_missing(sub, prop, fit_missing_outcome(sub, features=ofeat))
                else:
                    fit = ipw_missing(sub, prop)
                reports[name] = wcp_missing(fit, missing_plugins(sub, fit, regime))
            except np.linalg.LinAlgError:
                reports[name] = None
        valid = [r for r in reports.values() if r is not None]
        chosen = select(valid) if valid else None
        for name, r in reports.items():
            if r is None:
                rows.append({"candidate": name, "n_params": np.nan, "regime": regime, "criterion": WCP,
                             "gof": np.nan, "penalty": np.nan, "total": np.nan, "selected": False, "failed": True})
            else:
                rows.append({"candidate": name, "n_params": r.n_params, "regime": regime, "criterion": WCP,
                             "gof": r.gof, "penalty": r.penalty, "total": r.total, "selected": name == chosen,
                             "failed": False})
    return pd.DataFrame(rows, columns=CRITERIA_COLUMNS)


def arm_table_frame(data: Dataset, arm_values, x=None) -> pd.DataFrame:
    """Long ``(sample, arm)`` frame in the arm-level file layout.

    Unobserved arms repeat the sample's observed outcome and confounders so every
    row is complete; readers use the ``t = 1`` row.
    """
    n, h = data.treatments.shape
    cols = {"sample_id": np.repeat(np.arange(n), h), "arm": np.tile(np.asarray(arm_values, float), n),
            "t": data.treatments.reshape(-1).astype(int)}
    for k in range(data.outcome_dim):
        cols[f"y_{k + 1}"] = np.repeat(data.outcomes[:, k], h)
    for k in range(data.confounders.shape[1]):
        cols[f"z_{k + 1}"] = np.repeat(data.confounders[:, k], h)
    if x is not None:
        for k in range(x.shape[-1]):
            cols[f"x_{k + 1}"] = x[:, :, k].reshape(-1)
    return pd.DataFrame(cols)


def missing_table_frame(data: MissingDataset) -> pd.DataFrame:
    cols = {"sample_id": np.arange(data.n_samples), "t": data.missing_indicator.astype(int),
            "y_1": data.outcomes[:, 0]}
    for k in range(data.confounders.shape[1]):
        cols[f"z_{k + 1}"] = data.confounders[:, k]
    for k in range(data.n_params):
        cols[f"x_{k + 1}"] = data.design[:, 0, k]
    return pd.DataFrame(cols)
