"""L1-penalized modular regression, structure learning, and the
ridge-projection computational shortcut.

The penalized modular objective is the plain Lasso objective with its
linear term swapped for a proxy cross-term, so everything here routes
through the shared quadratic solver in :mod:`modreg.learners`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, FoldAssignment, split_folds
from .errors import DataError
from .learners import (
    LambdaPath,
    Learner,
    PenaltyConfig,
    _path_on,
    choose_lambda_index,
    cv_lambda_path,
    default_lambda_grid,
    solve_spd,
)
from .modular import (
    ModularFit,
    ProxyCrossTerm,
    _fit_with_context,
    _predict_block,
    _three_term_mean,
    _three_term_rows,
    proxy_cross_term_identity,
)


@dataclass(frozen=True)
class StructurePartition:
    """Split of the X coordinates for the robust cross-term.

    ``j1`` holds coordinates treated as conditionally independent of Y
    given the enlarged conditioning set; ``j2`` holds coordinates merged
    into that conditioning set. Indices are 0-based.
    """

    j1: np.ndarray
    j2: np.ndarray
    p_x: int

    def __post_init__(self):
        j1 = np.asarray(self.j1, dtype=np.int64).ravel()
        j2 = np.asarray(self.j2, dtype=np.int64).ravel()
        j1.sort()
        j2.sort()
        merged = np.concatenate([j1, j2])
        if merged.size != self.p_x or not np.array_equal(
            np.sort(merged), np.arange(self.p_x)
        ):
            raise DataError("j1 and j2 must partition the X coordinates")
        j1.setflags(write=False)
        j2.setflags(write=False)
        object.__setattr__(self, "j1", j1)
        object.__setattr__(self, "j2", j2)


def _column_scales(x: np.ndarray, standardize: bool) -> np.ndarray:
    if not standardize:
        return np.ones(x.shape[1])
    s = x.std(axis=0)  # population convention, as elsewhere
    return np.where(s > 0, s, 1.0)


def _rescale_path(path: LambdaPath, scales: np.ndarray) -> LambdaPath:
    """Map a path solved on the scale-normalized design back to raw scale."""
    return LambdaPath(
        lambdas=path.lambdas,
        coefs=path.coefs / scales,
        cv_errors=path.cv_errors,
        cv_se=path.cv_se,
        chosen_index=path.chosen_index,
        rule=path.rule,
    )


def modular_lasso(
    d: Dataset,
    c: ProxyCrossTerm,
    config: PenaltyConfig | None = None,
    seed: int = 0,
    *,
    standardize: bool = True,
    folds: FoldAssignment | None = None,
) -> ModularFit:
    """L1-penalized modular regression at a cross-validated lambda.

    The penalty acts on the scale-normalized design (each column divided
    by its population sd) and coefficients are reported on the original
    scale; pass ``standardize=False`` to penalize raw columns. CV scores
    candidate fits by held-out (y - x theta)^2. With an identity
    cross-term this is exactly the cross-validated Lasso.
    """
    d.require("x", "y")
    config = config or PenaltyConfig()
    if c.row_contributions is None or c.row_contributions.shape[0] != d.n:
        raise DataError("penalized modular fits need per-row cross-term contributions")
    scales = _column_scales(d.x, standardize)
    path_s = cv_lambda_path(
        d.x / scales,
        d.y,
        config,
        seed,
        linear_terms=c.row_contributions / scales,
        folds=folds,
    )
    path = _rescale_path(path_s, scales)
    theta = path.theta
    gram = d.x.T @ d.x / d.n
    objective = float(
        0.5 * theta @ gram @ theta
        - c.c_hat @ theta
        + path.chosen_lambda * np.abs(path_s.theta).sum()
    )
    tag = "lasso" if c.kind == "identity" else "mod-lasso"
    return ModularFit(
        theta_hat=theta,
        estimator_tag=tag,
        objective_value=objective,
        n=d.n,
        path=path,
        partition=c.partition,
    )


def lasso(
    d: Dataset,
    config: PenaltyConfig | None = None,
    seed: int = 0,
    *,
    standardize: bool = True,
    folds: FoldAssignment | None = None,
) -> ModularFit:
    """Cross-validated Lasso of y on x (identity cross-term)."""
    return modular_lasso(
        d,
        proxy_cross_term_identity(d),
        config,
        seed,
        standardize=standardize,
        folds=folds,
    )


def learn_structure(
    d: Dataset,
    config: PenaltyConfig | None = None,
    seed: int = 0,
    *,
    standardize: bool = True,
) -> StructurePartition:
    """Lasso-based structure learning.

    Regresses y on the concatenated (x, z) design at a cross-validated
    lambda and merges every X coordinate with a nonzero coefficient into
    the conditioning set (j2). Defaults to the 1se rule, which is the
    stabler choice for selection.
    """
    d.require("x", "z", "y")
    config = config or PenaltyConfig(cv_rule="1se")
    xz = np.hstack([d.x, d.z])
    scales = _column_scales(xz, standardize)
    path = cv_lambda_path(xz / scales, d.y, config, seed)
    coef_x = path.theta[: d.p_x]
    j2 = np.flatnonzero(coef_x != 0)
    j1 = np.setdiff1d(np.arange(d.p_x), j2)
    return StructurePartition(j1=j1, j2=j2, p_x=d.p_x)


def proxy_cross_term_struct(
    d: Dataset,
    partition: StructurePartition,
    learner_x: Learner,
    learner_y: Learner,
    folds: FoldAssignment,
    *,
    j2_in_mu_y: bool = True,
) -> ProxyCrossTerm:
    """Robust cross-term under a learned (or known) structure partition.

    Coordinates in j1 use the three-term proxy with the enlarged
    conditioning set (z, x_{j2}); coordinates in j2 keep the raw x_j y
    contribution, which is the same as plugging mu_{x,j} := x_j into the
    three-term form. ``j2_in_mu_y=False`` fits mu_y on z alone, which
    avoids reusing in-sample-selected columns at the cost of bias when
    the partition is real.
    """
    d.require("x", "z", "y")
    if partition.p_x != d.p_x:
        raise DataError("partition does not conform to p_x")
    if folds.n != d.n:
        raise DataError("fold plan does not match dataset rows")
    j1, j2 = partition.j1, partition.j2
    if j1.size == 0:
        # fully non-modular limit: exact sample cross moment
        rows = d.x * d.y[:, None]
        return ProxyCrossTerm(
            c_hat=rows.mean(axis=0),
            kind="struct",
            row_contributions=rows,
            partition=partition,
        )

    z_full = np.hstack([d.z, d.x[:, j2]]) if j2.size else d.z
    feats_y = z_full if j2_in_mu_y else d.z
    x_j1 = d.x[:, j1]

    mu_x_full = np.empty((d.n, d.p_x))
    mu_x_full[:, j2] = d.x[:, j2]
    mu_y = np.empty(d.n)
    for k in range(1, folds.k + 1):
        tr = folds.rows_outside_fold(k)
        va = folds.rows_in_fold(k)
        if tr.size == 0:
            raise DataError(f"fold {k} has an empty training complement")
        if learner_x.supports_multi_target:
            mx = _fit_with_context(learner_x, z_full[tr], x_j1[tr], k, "mu_x")
            mu_x_full[np.ix_(va, j1)] = _predict_block(
                learner_x, mx, z_full[va], multi=True
            )
        else:
            models = [
                _fit_with_context(learner_x, z_full[tr], x_j1[tr, i], k, f"mu_x[{j}]")
                for i, j in enumerate(j1)
            ]
            mu_x_full[np.ix_(va, j1)] = _predict_block(
                learner_x, models, z_full[va], multi=False
            )
        my = _fit_with_context(learner_y, feats_y[tr], d.y[tr], k, "mu_y")
        mu_y[va] = np.asarray(my.predict(feats_y[va]), dtype=np.float64).ravel()
    if not (np.all(np.isfinite(mu_x_full)) and np.all(np.isfinite(mu_y))):
        raise DataError("sub-task predictions contain non-finite values")

    rows = _three_term_rows(d.x, d.y, mu_x_full, mu_y)
    c_hat = _three_term_mean(d.x, d.y, mu_x_full, mu_y)
    if j2.size:
        # assign directly instead of relying on cancellation of the
        # mu_x = x_j plug-in, keeping the j2 entries exact
        rows[:, j2] = d.x[:, j2] * d.y[:, None]
        c_hat[j2] = rows[:, j2].mean(axis=0)
    return ProxyCrossTerm(
        c_hat=c_hat, kind="struct", row_contributions=rows, partition=partition
    )


# ---------------------------------------------------------------------------
# Projection shortcut
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProjectionOperator:
    """A symmetric linear smoother standing in for a conditional mean.

    ``source`` records how to rebuild the operator on a row subset:
    'ols-hat' and 'ridge-hat' are recomputed from the auxiliary block;
    'fixed' operators are sliced to the training rows.
    """

    pi: np.ndarray
    source: str
    eta: float = 0.0

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        if pi.ndim != 2 or pi.shape[0] != pi.shape[1]:
            raise DataError("projection operator must be square")
        if not np.allclose(pi, pi.T, atol=1e-10 * max(1.0, float(np.abs(pi).max()))):
            raise DataError("projection operator must be symmetric")
        if self.source not in ("ols-hat", "ridge-hat", "fixed"):
            raise DataError(f"unknown projection source '{self.source}'")
        if self.source == "fixed":
            eigs = np.linalg.eigvalsh((pi + pi.T) / 2.0)
            if eigs.min() < -1e-8 or eigs.max() > 1.0 + 1e-8:
                raise DataError("projection eigenvalues must lie in [0, 1]")
        object.__setattr__(self, "pi", pi)

    @property
    def n(self) -> int:
        return self.pi.shape[0]

    @classmethod
    def ridge_hat(cls, z: np.ndarray, eta: float) -> "ProjectionOperator":
        """Z (Z'Z + eta I)^{-1} Z' via a p_z-by-p_z solve."""
        if eta < 0:
            raise DataError("ridge penalty must be nonnegative")
        z = np.asarray(z, dtype=np.float64)
        pz = z.shape[1]
        body = solve_spd(z.T @ z + eta * np.eye(pz), z.T)
        pi = z @ body
        pi = (pi + pi.T) / 2.0
        source = "ols-hat" if eta == 0 else "ridge-hat"
        return cls(pi=pi, source=source, eta=float(eta))

    @classmethod
    def ols_hat(cls, z: np.ndarray) -> "ProjectionOperator":
        return cls.ridge_hat(z, 0.0)

    @classmethod
    def fixed(cls, pi: np.ndarray) -> "ProjectionOperator":
        return cls(pi=pi, source="fixed")

    def on_rows(self, rows: np.ndarray, z: np.ndarray | None) -> np.ndarray:
        """Training-row version of the operator for within-fold CV."""
        if self.source == "fixed":
            return self.pi[np.ix_(rows, rows)]
        if z is None:
            raise DataError("rebuilding a hat operator needs the auxiliary block")
        return ProjectionOperator.ridge_hat(z[rows], self.eta).pi


def transformed_response(
    pi_x: np.ndarray, pi_y: np.ndarray, y: np.ndarray
) -> np.ndarray:
    """(Pi_y + Pi_x - Pi_x Pi_y) y, the shortcut's working response."""
    return pi_y @ y + pi_x @ y - pi_x @ (pi_y @ y)


def projection_shortcut(
    d: Dataset,
    pi_x: ProjectionOperator,
    pi_y: ProjectionOperator,
    config: PenaltyConfig | None = None,
    seed: int = 0,
    *,
    standardize: bool = True,
    folds: FoldAssignment | None = None,
) -> ModularFit:
    """Modular Lasso via symmetric smoothers instead of per-column fits.

    Equivalent to the Lasso of x against the transformed response
    (Pi_y + Pi_x - Pi_x Pi_y) y at a cross-validated lambda. Within CV
    the operators are rebuilt from training rows only, and candidates are
    scored on held-out raw y.
    """
    d.require("x", "y")
    config = config or PenaltyConfig()
    if pi_x.n != d.n or pi_y.n != d.n:
        raise DataError("projection operators do not conform to the dataset rows")
    scales = _column_scales(d.x, standardize)
    xs = d.x / scales
    response = transformed_response(pi_x.pi, pi_y.pi, d.y)

    c_full = (xs * response[:, None]).mean(axis=0)
    grid = (
        config.lambda_grid
        if config.lambda_grid is not None
        else default_lambda_grid(c_full, config.n_lambdas, config.lambda_min_ratio)
    )
    if folds is None:
        if d.n < config.cv_folds:
            raise DataError(f"n={d.n} is too small for {config.cv_folds}-fold CV")
        folds = split_folds(d.n, config.cv_folds, seed)

    fold_errors = np.empty((folds.k, grid.size))
    for k in range(1, folds.k + 1):
        tr = folds.rows_outside_fold(k)
        va = folds.rows_in_fold(k)
        px_tr = pi_x.on_rows(tr, d.z)
        py_tr = pi_y.on_rows(tr, d.z)
        r_tr = transformed_response(px_tr, py_tr, d.y[tr])
        G_tr = xs[tr].T @ xs[tr] / tr.size
        c_tr = (xs[tr] * r_tr[:, None]).mean(axis=0)
        coefs = _path_on(G_tr, c_tr, grid)
        resid = d.y[va][None, :] - coefs @ xs[va].T
        fold_errors[k - 1] = np.mean(resid**2, axis=1)
    cv_errors = fold_errors.mean(axis=0)
    cv_se = fold_errors.std(axis=0, ddof=1) / np.sqrt(folds.k)
    chosen = choose_lambda_index(cv_errors, cv_se, config.cv_rule)

    G_full = xs.T @ xs / d.n
    coefs_full = _path_on(G_full, c_full, grid)
    path = _rescale_path(
        LambdaPath(
            lambdas=np.asarray(grid, dtype=np.float64),
            coefs=coefs_full,
            cv_errors=cv_errors,
            cv_se=cv_se,
            chosen_index=chosen,
            rule=config.cv_rule,
        ),
        scales,
    )
    theta_s = coefs_full[chosen]
    objective = float(
        0.5 * theta_s @ G_full @ theta_s
        - c_full @ theta_s
        + path.chosen_lambda * np.abs(theta_s).sum()
    )
    return ModularFit(
        theta_hat=path.theta,
        estimator_tag="mod-lasso",
        objective_value=objective,
        n=d.n,
        path=path,
    )


def cv_projection_etas(
    d: Dataset,
    eta_grid_x: np.ndarray,
    eta_grid_y: np.ndarray,
    config: PenaltyConfig | None = None,
    seed: int = 0,
) -> tuple[float, float, ModularFit]:
    """Grid-search the ridge penalties of the projection shortcut.

    Every (eta_x, eta_y) cell is scored by its minimal cross-validated
    held-out error over the lambda path, with hat matrices rebuilt from
    training rows inside each fold; the winning cell is refit with
    :func:`projection_shortcut`.
    """
    d.require("x", "y", "z")
    config = config or PenaltyConfig()
    gx = np.asarray(eta_grid_x, dtype=np.float64).ravel()
    gy = np.asarray(eta_grid_y, dtype=np.float64).ravel()
    if gx.size == 0 or gy.size == 0:
        raise DataError("eta grids must be non-empty")
    if d.n < config.cv_folds:
        raise DataError(f"n={d.n} is too small for {config.cv_folds}-fold CV")
    folds = split_folds(d.n, config.cv_folds, seed)
    scales = _column_scales(d.x, True)
    xs = d.x / scales

    # cache hat matrices across grid cells; etas repeat often. Fold 0
    # holds the full-data hats used to anchor each cell's lambda grid.
    hat_cache: dict[tuple[int, float], np.ndarray] = {}
    all_rows = np.arange(d.n)

    def hat(k: int, rows: np.ndarray, eta: float) -> np.ndarray:
        key = (k, float(eta))
        if key not in hat_cache:
            hat_cache[key] = ProjectionOperator.ridge_hat(d.z[rows], eta).pi
        return hat_cache[key]

    best: tuple[float, float, float] | None = None
    for ex in gx:
        for ey in gy:
            if config.lambda_grid is not None:
                grid = config.lambda_grid
            else:
                r_full = transformed_response(
                    hat(0, all_rows, ex), hat(0, all_rows, ey), d.y
                )
                c_cell = (xs * r_full[:, None]).mean(axis=0)
                grid = default_lambda_grid(
                    c_cell, config.n_lambdas, config.lambda_min_ratio
                )
            fold_err = []
            for k in range(1, folds.k + 1):
                tr = folds.rows_outside_fold(k)
                va = folds.rows_in_fold(k)
                r_tr = transformed_response(hat(k, tr, ex), hat(k, tr, ey), d.y[tr])
                c_tr = (xs[tr] * r_tr[:, None]).mean(axis=0)
                G_tr = xs[tr].T @ xs[tr] / tr.size
                coefs = _path_on(G_tr, c_tr, grid)
                resid = d.y[va][None, :] - coefs @ xs[va].T
                fold_err.append(np.mean(resid**2, axis=1))
            score = float(np.min(np.mean(fold_err, axis=0)))
            if best is None or score < best[0]:
                best = (score, float(ex), float(ey))
    _, eta_x, eta_y = best
    fit = projection_shortcut(
        d,
        ProjectionOperator.ridge_hat(d.z, eta_x),
        ProjectionOperator.ridge_hat(d.z, eta_y),
        config,
        seed,
        folds=folds,
    )
    return eta_x, eta_y, fit
