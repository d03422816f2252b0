"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd

from .config import ConfigError, config_hash, load_config, resolved
from .datamode import (MISSING_KEYS, SELECT_KEYS, SchemaError, arm_table_frame, missing_table_frame,
                       read_arm_table, read_missing_table, read_spec, run_missing, run_select)
from .missing import simulate_mar
from .study import StudyAbort, generate_replication, run_study

log = logging.getLogger("msmcp")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3


def write_csv(df: pd.DataFrame, path: Path, digest: str):
    """CSV with a ``# config_sha256=`` comment line; floats use the shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_sha256={digest}\n")
        df.to_csv(fh, index=False, lineterminator="\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def cmd_simulate(args) -> int:
    overrides = {"replications": args.reps, "master_seed": args.seed, "threads": args.threads}
    try:
        config, out_dir = load_config(args.config, overrides)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_USAGE
    out = Path(args.out or out_dir or "results")
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)

    if args.dump is not None:
        n = args.dump_n or config.N[0]
        b = config.b[0] if args.dump_b is None else args.dump_b
        data, truth = generate_replication(config, args.dump, n, b)
        write_csv(arm_table_frame(data, config.arm_values), out / "data.csv", digest)
        spec = {"regimes": list(config.regimes), "criteria": [c for c in config.criteria],
                "sigma2": config.sigma2, "orders": list(config.orders), "propensity_features": [1],
                "propensity_intercept": False, "alpha_known": list(config.alpha_true),
                "outcome_features": [] if config.outcome_drop_z else [1], "outcome_model": config.outcome_model}
        (out / "spec.toml").write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in spec.items()))
        log.info("wrote replication %d (N=%d, b=%s) to %s", args.dump, n, b, out)
        return EXIT_OK

    started = _now()
    try:
        tables = run_study(config)
    except StudyAbort as exc:
        log.error("study aborted: %s", exc)
        return EXIT_ABORT
    paths = {"table1": out / "table1.csv", "selection": out / "selection.csv", "errors": out / "errors.csv"}
    write_csv(tables.table1, paths["table1"], digest)
    write_csv(tables.selection, paths["selection"], digest)
    write_csv(tables.errors, paths["errors"], digest)
    manifest = {"config": resolved(config), "config_sha256": digest,
                "artifacts": {k: str(v) for k, v in paths.items()}, "started": started, "finished": _now(),
                "wall_time_s": tables.metadata["wall_time_s"], "failures": tables.metadata["failures"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    log.info("wrote tables to %s", out)
    return EXIT_OK


def cmd_select(args) -> int:
    try:
        spec = read_spec(args.spec, SELECT_KEYS)
        table = read_arm_table(args.data)
        result = run_select(table, spec)
    except SchemaError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(result, out / "criteria.csv", _file_digest(args.data, args.spec))
    for (regime, crit), g in result.groupby(["regime", "criterion"], sort=False):
        chosen = g.loc[g["selected"], "candidate"].tolist()
        log.info("%s %s: selected %s", regime, crit, chosen[0] if chosen else "none")
    return EXIT_OK


def cmd_missing(args) -> int:
    try:
        spec = read_spec(args.spec, MISSING_KEYS)
        data = read_missing_table(args.data)
        x_names = [c for c in pd.read_csv(args.data, comment="#", nrows=0, sep=None, engine="python").columns
                   if c.startswith("x_")]
        result = run_missing(data, spec, sorted(x_names, key=lambda c: int(c[2:])))
    except SchemaError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(result, out / "criteria.csv", _file_digest(args.data, args.spec))
    return EXIT_OK


def cmd_missing_dump(args) -> int:
    if args.n <= 0:
        log.error("--n must be positive")
        return EXIT_USAGE
    data = simulate_mar(args.n, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame = missing_table_frame(data)
    write_csv(frame, out / "data.csv", hashlib.sha256(f"mar:{args.n}:{args.seed}".encode()).hexdigest())
    (out / "spec.toml").write_text('regimes = ["IPW_estimated", "DR"]\n'
                                   'candidates = {const = ["x_1"], full = ["x_1", "x_2"]}\n')
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msmcp", description="Cp-type model selection for marginal structural "
                                     "models with IPW and doubly robust estimators.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the Monte Carlo study")
    p.add_argument("--config", required=True, help="study config (TOML)")
    p.add_argument("--reps", type=int, help="override replications")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--threads", type=int, help="worker processes")
    p.add_argument("--out", help="output directory (default: out_dir from the config, else ./results)")
    p.add_argument("--dump", type=int, metavar="REP", help="write replication REP as data.csv + spec.toml instead")
    p.add_argument("--dump-n", type=int, help="sample size of the dumped replication (default: first N)")
    p.add_argument("--dump-b", type=float, help="b of the dumped replication (default: first b)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select", help="compute criteria on an arm-level data file")
    p.add_argument("data")
    p.add_argument("spec")
    p.add_argument("--out", default=".", help="directory for criteria.csv")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("missing", help="compute missing-data wCp on a per-sample data file")
    p.add_argument("data")
    p.add_argument("spec")
    p.add_argument("--out", default=".", help="directory for criteria.csv")
    p.set_defaults(func=cmd_missing)

    p = sub.add_parser("missing-dump", help="write a missing-at-random toy data set and spec")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_missing_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
