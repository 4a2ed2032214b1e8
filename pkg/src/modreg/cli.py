"""Command-line front end: fit, simulate, and fuse subcommands.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
All outputs are JSON or CSV and contain no timestamps, so identical
arguments and input files produce identical bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .data import load_csv, load_fusion_csv, split_folds
from .errors import DataError, NumericalError
from .highdim import (
    ProjectionOperator,
    cv_projection_etas,
    lasso,
    learn_structure,
    modular_lasso,
    projection_shortcut,
    proxy_cross_term_struct,
)
from .learners import PenaltyConfig, get_learner
from .modular import (
    FAMILIES,
    crossfit_means,
    modular_glm,
    modular_ols,
    proxy_cross_term_identity,
    proxy_cross_term_lm,
)
from .fusion import fusion_fit, proxy_cross_term_miss, proxy_cross_term_part
from .simbench import SimConfig, run_study

FIT_METHODS = ("ols", "mod-ols", "glm", "mod-glm", "lasso", "mod-lasso", "proj")
LEARNERS = ("linear", "ridge-cv", "lasso-cv", "const")


def _read_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot open '{path}': {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"'{path}' is not valid JSON: {exc}") from exc


def _resolve_seed(args) -> int:
    env = os.environ.get("MODREG_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise DataError(f"MODREG_SEED must be an integer, got '{env}'") from None
    return args.seed


def _penalty(args) -> PenaltyConfig:
    grid = None
    if getattr(args, "lambda_grid", None):
        grid = np.asarray(sorted((float(v) for v in args.lambda_grid), reverse=True))
    return PenaltyConfig(
        lambda_grid=grid,
        cv_folds=args.cv_folds,
        cv_rule=args.cv_rule,
        n_lambdas=args.n_lambdas,
    )


def _path_csv_name(out: str) -> str:
    base, ext = os.path.splitext(out)
    return base + ".path.csv"


def cmd_fit(args) -> int:
    seed = _resolve_seed(args)
    schema = _read_json(args.schema)
    d = load_csv(args.data, schema)
    d.require("x")
    method = args.method

    def cross_term():
        if args.plugin == "identity":
            return proxy_cross_term_identity(d)
        lx = get_learner(args.learner, seed=seed, cv_folds=args.cv_folds)
        ly = get_learner(args.learner, seed=seed + 1, cv_folds=args.cv_folds)
        folds = split_folds(d.n, args.folds, seed)
        if args.structure == "learn":
            part = learn_structure(d, PenaltyConfig(cv_rule="1se"), seed)
            return proxy_cross_term_struct(d, part, lx, ly, folds)
        return proxy_cross_term_lm(d, crossfit_means(d, lx, ly, folds))

    if method == "ols":
        fit = modular_ols(d, proxy_cross_term_identity(d))
    elif method == "mod-ols":
        fit = modular_ols(d, cross_term())
    elif method in ("glm", "mod-glm"):
        family = FAMILIES[args.family]
        c = proxy_cross_term_identity(d) if method == "glm" else cross_term()
        fit = modular_glm(d, c, family)
    elif method == "lasso":
        fit = lasso(d, _penalty(args), seed=seed)
    elif method == "mod-lasso":
        fit = modular_lasso(d, cross_term(), _penalty(args), seed=seed)
    elif method == "proj":
        if args.eta_x == "cv" or args.eta_y == "cv":
            base = max(float(np.trace(d.z.T @ d.z)) / d.p_z, 1e-8)
            grid = base * np.geomspace(1e-3, 1e2, 6)
            _, _, fit = cv_projection_etas(d, grid, grid, _penalty(args), seed)
        else:
            fit = projection_shortcut(
                d,
                ProjectionOperator.ridge_hat(d.z, float(args.eta_x)),
                ProjectionOperator.ridge_hat(d.z, float(args.eta_y)),
                _penalty(args),
                seed,
            )
    else:  # pragma: no cover - argparse restricts choices
        raise DataError(f"unknown method '{method}'")

    fit.to_json(args.out)
    if fit.path is not None:
        fit.path.write_csv(args.path_out or _path_csv_name(args.out))
    return 0


def default_estimators(setting: str) -> list[str]:
    """Per-setting defaults: the low-dimensional studies compare OLS with
    the linear, ridge, and lasso sub-task learners (a random-forest slot
    is left to external plug-ins); high-dimensional studies compare the
    Lasso with the ridge-learner modular Lasso."""
    if setting.startswith("high"):
        return ["lasso", "mod-lasso:ridge-cv"]
    return ["ols", "mod-ols:linear", "mod-ols:ridge-cv", "mod-ols:lasso-cv"]


def cmd_simulate(args) -> int:
    seed = _resolve_seed(args)
    raw = _read_json(args.config)
    estimators = raw.pop("estimators", None) or args.estimator
    if not estimators:
        estimators = default_estimators(raw.get("setting", "low1"))
    if seed is not None:
        raw["seed"] = seed
    known = set(SimConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    for key in ("b", "gamma", "gamma_tilde"):
        if raw.get(key) is not None:
            raw[key] = np.asarray(raw[key], dtype=np.float64)
    config = SimConfig(**raw)
    os.makedirs(args.out, exist_ok=True)

    def log(msg: str) -> None:
        print(msg, file=sys.stderr)

    result = run_study(
        config,
        list(estimators),
        n_replicates=args.replicates,
        parallelism=args.jobs,
        penalty=PenaltyConfig(cv_folds=args.cv_folds, n_lambdas=args.n_lambdas),
        log=log if not args.quiet else None,
    )
    result.to_csv(os.path.join(args.out, "results.csv"))
    result.summary_json(os.path.join(args.out, "summary.json"))
    return 0


def cmd_fuse(args) -> int:
    seed = _resolve_seed(args)
    schema = _read_json(args.schema)
    if not (args.triples or args.xz or args.zy):
        raise DataError("provide at least one of --triples, --xz, --zy")
    fd = load_fusion_csv(args.triples, args.xz, args.zy, schema)
    lx = get_learner(args.learner, seed=seed, cv_folds=args.cv_folds)
    ly = get_learner(args.learner, seed=seed + 1, cv_folds=args.cv_folds)
    if fd.triples is None:
        if fd.xz_pairs is None or fd.zy_pairs is None:
            raise DataError(
                "unidentifiable regime: with no joint rows both --xz and --zy are needed"
            )
        c = proxy_cross_term_miss(fd, lx, ly, seed)
    else:
        c = proxy_cross_term_part(fd, lx, ly, seed)
    penalty = _penalty(args) if args.penalize else None
    fit = fusion_fit(fd, c, penalty, seed)
    fit.to_json(args.out)
    if fit.path is not None:
        fit.path.write_csv(args.path_out or _path_csv_name(args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modreg",
        description="Modular regression: estimation, simulation, and data fusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--seed", type=int, default=seed_default,
                       help="RNG seed (MODREG_SEED overrides)")
        p.add_argument("--cv-folds", type=int, default=10,
                       help="folds for lambda/eta cross-validation")
        p.add_argument("--cv-rule", choices=("min", "1se"), default="min",
                       help="lambda selection rule")
        p.add_argument("--n-lambdas", type=int, default=100,
                       help="lambda grid size when no explicit grid is given")
        p.add_argument("--lambda-grid", nargs="*", type=float, default=None,
                       help="explicit lambda grid (sorted descending internally)")

    fit = sub.add_parser("fit", help="fit one estimator on a CSV dataset")
    fit.add_argument("--method", choices=FIT_METHODS, required=True)
    fit.add_argument("--data", required=True, help="CSV file with a header row")
    fit.add_argument("--schema", required=True,
                     help="JSON map column -> x|z|y|ignore")
    fit.add_argument("--learner", choices=LEARNERS, default="linear",
                     help="sub-task learner for modular methods")
    fit.add_argument("--plugin", choices=("identity",), default=None,
                     help="bypass sub-task learning with the identity plug-in")
    fit.add_argument("--structure", choices=("learn",), default=None,
                     help="learn a conditioning partition before the fit")
    fit.add_argument("--family", choices=tuple(FAMILIES), default="gaussian",
                     help="GLM family for glm/mod-glm")
    fit.add_argument("--folds", type=int, default=2, help="cross-fitting folds")
    fit.add_argument("--eta-x", default="cv",
                     help="ridge penalty for the X smoother, or 'cv'")
    fit.add_argument("--eta-y", default="cv",
                     help="ridge penalty for the Y smoother, or 'cv'")
    fit.add_argument("--out", required=True, help="output JSON path")
    fit.add_argument("--path-out", default=None,
                     help="lambda-path CSV (default: <out>.path.csv)")
    common(fit)
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run a seeded simulation study")
    sim.add_argument("--config", required=True, help="JSON SimConfig")
    sim.add_argument("--replicates", type=int, required=True)
    sim.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                     help="worker processes (default: logical cores)")
    sim.add_argument("--estimator", action="append", default=None,
                     help="estimator spec; repeatable; overrides the config list")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--quiet", action="store_true",
                     help="suppress the per-replicate log line on stderr")
    common(sim, seed_default=None)
    sim.set_defaults(func=cmd_simulate)

    fuse = sub.add_parser("fuse", help="fit from pairwise/partial observations")
    fuse.add_argument("--triples", default=None, help="CSV with x, z, y columns")
    fuse.add_argument("--xz", default=None, help="CSV with x, z columns")
    fuse.add_argument("--zy", default=None, help="CSV with z, y columns")
    fuse.add_argument("--schema", required=True,
                      help="JSON map column -> x|z|y|ignore")
    fuse.add_argument("--learner", choices=LEARNERS, default="linear")
    fuse.add_argument("--penalize", action="store_true",
                      help="fit the l1-penalized estimator")
    fuse.add_argument("--out", required=True, help="output JSON path")
    fuse.add_argument("--path-out", default=None)
    common(fuse)
    fuse.set_defaults(func=cmd_fuse)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
