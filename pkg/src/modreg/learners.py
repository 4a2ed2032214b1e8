"""Conditional-mean learners and the shared penalized quadratic solver.

The central primitive is :func:`solve_l1_quadratic`, which minimizes

    0.5 * theta' G theta - c' theta + lam * ||theta||_1

by cyclic coordinate descent with covariance updates. Both the plain Lasso
and the modular Lasso are instances of this problem: they differ only in
the linear term ``c``, so one solver (and one set of solver tests) serves
both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .data import FoldAssignment, split_folds
from .errors import ConvergenceError, DataError, SingularMatrixError

# Convergence defaults for the coordinate-descent kernel.
CD_TOL = 1e-7
CD_MAX_SWEEPS = 10_000
KKT_TOL = 1e-6


# ---------------------------------------------------------------------------
# Dense symmetric solves
# ---------------------------------------------------------------------------


def solve_spd(G: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve G x = b for symmetric positive-definite G.

    If the Cholesky factorization fails once, a jitter of
    1e-10 * trace(G)/p is added to the diagonal and the solve is retried;
    a second failure raises SingularMatrixError naming the smallest pivot.
    """
    G = np.asarray(G, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    try:
        np.linalg.cholesky(G)
        return np.linalg.solve(G, b)
    except np.linalg.LinAlgError:
        pass
    p = G.shape[0]
    jitter = 1e-10 * np.trace(G) / max(p, 1)
    G_j = G + jitter * np.eye(p)
    try:
        np.linalg.cholesky(G_j)
        return np.linalg.solve(G_j, b)
    except np.linalg.LinAlgError:
        pivot = float(np.linalg.eigvalsh(G).min())
        raise SingularMatrixError(
            "symmetric solve failed even after diagonal jitter", smallest_pivot=pivot
        ) from None


@dataclass(frozen=True)
class LinearModel:
    """Fitted linear map; ``coef`` is (d,) for one target or (d, m)."""

    coef: np.ndarray

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.coef


def fit_ols(features: np.ndarray, targets: np.ndarray) -> LinearModel:
    """Least squares fit via the normal equations with the jitter policy."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("non-finite values in regression inputs")
    coef = solve_spd(x.T @ x, x.T @ y)
    return LinearModel(coef=coef)


def fit_ridge(features: np.ndarray, targets: np.ndarray, eta: float) -> LinearModel:
    """Ridge fit: solves (X'X + eta I) beta = X'y."""
    if eta < 0:
        raise DataError(f"ridge penalty must be nonnegative, got {eta}")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("non-finite values in regression inputs")
    p = x.shape[1]
    coef = solve_spd(x.T @ x + eta * np.eye(p), x.T @ y)
    return LinearModel(coef=coef)


# ---------------------------------------------------------------------------
# Penalized quadratic kernel
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _cd_sweeps(G, c, lam, theta, r, max_sweeps, tol):  # pragma: no cover - jitted
    """Cyclic coordinate descent on 0.5 t'Gt - c't + lam |t|_1.

    ``r`` must hold c - G theta on entry and is kept in sync. Returns
    (sweeps_used, converged, monotone) where monotone reports whether the
    objective was non-increasing across sweeps.
    """
    p = G.shape[0]
    prev_obj = np.inf
    monotone = True
    converged = False
    sweeps = 0
    for _ in range(max_sweeps):
        max_change = 0.0
        max_theta = 1.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = theta[j]
            rho = r[j] + gjj * old
            if rho > lam:
                new = (rho - lam) / gjj
            elif rho < -lam:
                new = (rho + lam) / gjj
            else:
                new = 0.0
            if new != old:
                delta = new - old
                theta[j] = new
                for i in range(p):
                    r[i] -= G[i, j] * delta
            change = abs(new - old)
            if change > max_change:
                max_change = change
            a = abs(new)
            if a > max_theta:
                max_theta = a
        sweeps += 1
        # objective from the maintained residual: t'Gt = t'(c - r)
        tc = 0.0
        tr = 0.0
        l1 = 0.0
        for j in range(p):
            tc += theta[j] * c[j]
            tr += theta[j] * r[j]
            l1 += abs(theta[j])
        obj = -0.5 * tc - 0.5 * tr + lam * l1
        if obj > prev_obj + 1e-12 * (1.0 + abs(prev_obj)):
            monotone = False
        prev_obj = obj
        if max_change <= tol * max_theta:
            converged = True
            break
    return sweeps, converged, monotone


def _kkt_residual(G: np.ndarray, c: np.ndarray, lam: float, theta: np.ndarray) -> float:
    """Max-norm violation of the subgradient optimality conditions."""
    active = np.diag(G) > 0
    if not np.any(active):
        return 0.0
    grad = G @ theta - c
    resid = np.where(
        theta > 0,
        np.abs(grad + lam),
        np.where(theta < 0, np.abs(grad - lam), np.maximum(np.abs(grad) - lam, 0.0)),
    )
    return float(np.max(resid[active]))


def solve_l1_quadratic(
    gram: np.ndarray,
    linear: np.ndarray,
    lam: float,
    warm_start: np.ndarray | None = None,
    max_sweeps: int = CD_MAX_SWEEPS,
    tol: float = CD_TOL,
) -> np.ndarray:
    """Minimize 0.5 theta' G theta - c' theta + lam ||theta||_1.

    Coordinates whose Gram diagonal is zero are held at zero. Raises
    ConvergenceError (carrying the last iterate and KKT residual) if the
    sweep budget is exhausted before the KKT conditions are met.
    """
    G = np.ascontiguousarray(gram, dtype=np.float64)
    c = np.ascontiguousarray(linear, dtype=np.float64).ravel()
    p = G.shape[0]
    if G.shape != (p, p) or c.shape[0] != p:
        raise DataError(f"gram is {G.shape}, linear term has length {c.shape[0]}")
    if lam < 0:
        raise DataError(f"l1 penalty must be nonnegative, got {lam}")
    if not np.allclose(G, G.T, atol=1e-8 * max(1.0, float(np.abs(G).max()))):
        raise DataError("gram matrix must be symmetric")
    if np.any(np.diag(G) < 0):
        raise DataError("gram matrix has negative diagonal entries")

    theta = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=np.float64)
    theta[np.diag(G) <= 0] = 0.0
    r = c - G @ theta

    kkt_cap = KKT_TOL * max(1.0, float(np.max(np.abs(c))) if p else 1.0)
    sweeps_left = max_sweeps
    cur_tol = tol
    while True:
        used, converged, monotone = _cd_sweeps(G, c, lam, theta, r, sweeps_left, cur_tol)
        if not monotone:
            raise ConvergenceError(
                "coordinate descent objective increased across a sweep",
                last_iterate=theta.copy(),
                kkt_residual=_kkt_residual(G, c, lam, theta),
            )
        kkt = _kkt_residual(G, c, lam, theta)
        if kkt <= kkt_cap:
            return theta
        sweeps_left -= used
        if not converged or sweeps_left <= 0:
            raise ConvergenceError(
                f"coordinate descent did not reach KKT tolerance in {max_sweeps} sweeps",
                last_iterate=theta.copy(),
                kkt_residual=kkt,
            )
        cur_tol = cur_tol / 10.0  # converged on change but KKT loose: tighten


# ---------------------------------------------------------------------------
# Cross-validated lambda paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PenaltyConfig:
    """Settings for l1 paths and the ridge penalty.

    ``lambda_grid`` of None means the default grid: ``n_lambdas``
    log-spaced values from lambda_max = ||c||_inf down to
    ``lambda_min_ratio`` * lambda_max.
    """

    lambda_grid: np.ndarray | None = None
    ridge_eta: float = 0.0
    cv_folds: int = 10
    cv_rule: str = "min"
    n_lambdas: int = 100
    lambda_min_ratio: float = 1e-3

    def __post_init__(self):
        if self.lambda_grid is not None:
            g = np.asarray(self.lambda_grid, dtype=np.float64).ravel()
            if g.size == 0:
                raise DataError("lambda grid is empty")
            if np.any(g <= 0):
                raise DataError("lambda grid entries must be positive")
            if g.size > 1 and np.any(np.diff(g) >= 0):
                raise DataError("lambda grid must be strictly decreasing")
            g.setflags(write=False)
            object.__setattr__(self, "lambda_grid", g)
        if self.ridge_eta < 0:
            raise DataError("ridge_eta must be nonnegative")
        if self.cv_rule not in ("min", "1se"):
            raise DataError(f"cv_rule must be 'min' or '1se', got '{self.cv_rule}'")
        if self.cv_folds < 2:
            raise DataError("cv_folds must be at least 2")


def default_lambda_grid(
    c: np.ndarray, n_lambdas: int = 100, min_ratio: float = 1e-3
) -> np.ndarray:
    """Log-spaced grid from ||c||_inf down to min_ratio * ||c||_inf."""
    lam_max = max(float(np.max(np.abs(c))), 1e-12)
    return np.geomspace(lam_max, min_ratio * lam_max, n_lambdas)


def _path_on(G, c, grid):
    """Warm-started solution path over a descending lambda grid."""
    coefs = np.empty((grid.size, c.size))
    theta = np.zeros(c.size)
    for i, lam in enumerate(grid):
        theta = solve_l1_quadratic(G, c, lam, warm_start=theta)
        coefs[i] = theta
    return coefs


@dataclass(frozen=True)
class LambdaPath:
    """A fitted l1 path with cross-validation summary.

    ``coefs`` holds the full-data solution at every grid value;
    ``theta`` is the solution at the CV-chosen lambda.
    """

    lambdas: np.ndarray
    coefs: np.ndarray
    cv_errors: np.ndarray
    cv_se: np.ndarray
    chosen_index: int
    rule: str

    @property
    def chosen_lambda(self) -> float:
        return float(self.lambdas[self.chosen_index])

    @property
    def theta(self) -> np.ndarray:
        return self.coefs[self.chosen_index]

    def nnz(self) -> np.ndarray:
        return np.count_nonzero(self.coefs, axis=1)

    def write_csv(self, path: str) -> None:
        """Tidy CSV: lambda, cv_error, cv_se, nnz, theta_1..theta_p."""
        p = self.coefs.shape[1]
        header = ["lambda", "cv_error", "cv_se", "nnz"] + [
            f"theta_{j + 1}" for j in range(p)
        ]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for i in range(self.lambdas.size):
                row = [
                    repr(float(self.lambdas[i])),
                    repr(float(self.cv_errors[i])),
                    repr(float(self.cv_se[i])),
                    str(int(np.count_nonzero(self.coefs[i]))),
                ] + [repr(float(v)) for v in self.coefs[i]]
                fh.write(",".join(row) + "\n")


def choose_lambda_index(cv_errors: np.ndarray, cv_se: np.ndarray, rule: str) -> int:
    """Apply the min or 1se selection rule to a descending-lambda path."""
    i_min = int(np.argmin(cv_errors))
    if rule == "min":
        return i_min
    cap = cv_errors[i_min] + cv_se[i_min]
    # grid is descending, so the first qualifying index is the largest lambda
    return int(np.flatnonzero(cv_errors <= cap)[0])


def cv_lambda_path(
    features: np.ndarray,
    targets: np.ndarray,
    config: PenaltyConfig | None = None,
    seed: int = 0,
    *,
    linear_terms: np.ndarray | None = None,
    folds: FoldAssignment | None = None,
) -> LambdaPath:
    """Cross-validate an l1 path and fit the full-data solution.

    By default this is the plain Lasso: the per-row linear contributions
    are x_i * y_i. Passing ``linear_terms`` (an n-by-p matrix of per-row
    contributions, e.g. a proxy cross-term) swaps the linear part of the
    objective while keeping held-out (y - x theta)^2 as the CV score.
    """
    config = config or PenaltyConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).ravel()
    n, p = x.shape
    if y.shape[0] != n:
        raise DataError("features and targets disagree on row count")
    if linear_terms is None:
        linear_terms = x * y[:, None]
    else:
        linear_terms = np.asarray(linear_terms, dtype=np.float64)
        if linear_terms.shape != (n, p):
            raise DataError(f"linear_terms must be {(n, p)}, got {linear_terms.shape}")
    if folds is None:
        if n < config.cv_folds:
            raise DataError(f"n={n} is too small for {config.cv_folds}-fold CV")
        folds = split_folds(n, config.cv_folds, seed)

    c_full = linear_terms.mean(axis=0)
    grid = (
        config.lambda_grid
        if config.lambda_grid is not None
        else default_lambda_grid(c_full, config.n_lambdas, config.lambda_min_ratio)
    )

    fold_errors = np.empty((folds.k, grid.size))
    for k in range(1, folds.k + 1):
        tr = folds.rows_outside_fold(k)
        va = folds.rows_in_fold(k)
        if tr.size == 0 or va.size == 0:
            raise DataError(f"fold {k} leaves an empty train or validation split")
        G_tr = x[tr].T @ x[tr] / tr.size
        c_tr = linear_terms[tr].mean(axis=0)
        coefs = _path_on(G_tr, c_tr, grid)
        resid = y[va][None, :] - coefs @ x[va].T
        fold_errors[k - 1] = np.mean(resid**2, axis=1)

    cv_errors = fold_errors.mean(axis=0)
    cv_se = fold_errors.std(axis=0, ddof=1) / np.sqrt(folds.k)
    chosen = choose_lambda_index(cv_errors, cv_se, config.cv_rule)

    G_full = x.T @ x / n
    coefs_full = _path_on(G_full, c_full, grid)
    return LambdaPath(
        lambdas=np.asarray(grid, dtype=np.float64),
        coefs=coefs_full,
        cv_errors=cv_errors,
        cv_se=cv_se,
        chosen_index=chosen,
        rule=config.cv_rule,
    )


# ---------------------------------------------------------------------------
# Learner interface for the conditional-mean sub-tasks
# ---------------------------------------------------------------------------


class Learner:
    """Base class for sub-task learners.

    ``fit(features, targets)`` returns a model with a deterministic
    ``predict``. ``targets`` may be a vector or an (n, m) matrix; learners
    that cannot fit several targets jointly set ``supports_multi_target``
    to False and are called once per column by the cross-fitting driver.
    """

    supports_multi_target: bool = False

    def fit(self, features: np.ndarray, targets: np.ndarray):
        raise NotImplementedError


class LinearLearner(Learner):
    """Plain least squares on the sub-task features."""

    supports_multi_target = True

    def fit(self, features, targets):
        return fit_ols(features, targets)


class RidgeLearner(Learner):
    """Ridge regression at a fixed penalty."""

    supports_multi_target = True

    def __init__(self, eta: float):
        self.eta = float(eta)

    def fit(self, features, targets):
        return fit_ridge(features, targets, self.eta)


class RidgeCVLearner(Learner):
    """Ridge with a per-target penalty chosen by K-fold cross-validation.

    The grid defaults to trace(Z'Z)/d scaled over eight decades. Targets
    are column-separable, so multi-target fits share fold factorizations.
    """

    supports_multi_target = True

    def __init__(
        self,
        eta_grid: np.ndarray | None = None,
        cv_folds: int = 10,
        rule: str = "min",
        seed: int = 0,
    ):
        self.eta_grid = None if eta_grid is None else np.asarray(eta_grid, float)
        self.cv_folds = cv_folds
        self.rule = rule
        self.seed = seed

    def _grid(self, z: np.ndarray) -> np.ndarray:
        if self.eta_grid is not None:
            return self.eta_grid
        base = max(float(np.trace(z.T @ z)) / max(z.shape[1], 1), 1e-8)
        return base * np.geomspace(1e-4, 1e2, 20)

    def fit(self, features, targets):
        z = np.asarray(features, dtype=np.float64)
        t = np.asarray(targets, dtype=np.float64)
        single = t.ndim == 1
        t2 = t[:, None] if single else t
        n, d = z.shape
        m = t2.shape[1]
        k = min(self.cv_folds, n)
        if k < 2:
            raise DataError("ridge CV needs at least 2 training rows")
        folds = split_folds(n, k, self.seed)
        grid = self._grid(z)
        sq_err = np.zeros((grid.size, m))
        eye = np.eye(d)
        for fold in range(1, k + 1):
            tr = folds.rows_outside_fold(fold)
            va = folds.rows_in_fold(fold)
            ztz = z[tr].T @ z[tr]
            ztt = z[tr].T @ t2[tr]
            for gi, eta in enumerate(grid):
                beta = solve_spd(ztz + eta * eye, ztt)
                resid = t2[va] - z[va] @ beta
                sq_err[gi] += np.sum(resid**2, axis=0)
        best = np.argmin(sq_err, axis=0)
        coef = np.empty((d, m))
        ztz = z.T @ z
        ztt = z.T @ t2
        for gi in np.unique(best):
            cols = np.flatnonzero(best == gi)
            beta = solve_spd(ztz + grid[gi] * eye, ztt[:, cols])
            coef[:, cols] = beta
        return LinearModel(coef=coef[:, 0] if single else coef)


class LassoCVLearner(Learner):
    """Cross-validated Lasso, one path per target column."""

    supports_multi_target = True

    def __init__(self, config: PenaltyConfig | None = None, seed: int = 0):
        self.config = config or PenaltyConfig()
        self.seed = seed

    def fit(self, features, targets):
        z = np.asarray(features, dtype=np.float64)
        t = np.asarray(targets, dtype=np.float64)
        single = t.ndim == 1
        t2 = t[:, None] if single else t
        n = z.shape[0]
        cfg = self.config
        if n < cfg.cv_folds:
            cfg = PenaltyConfig(
                lambda_grid=cfg.lambda_grid,
                ridge_eta=cfg.ridge_eta,
                cv_folds=max(2, n),
                cv_rule=cfg.cv_rule,
                n_lambdas=cfg.n_lambdas,
                lambda_min_ratio=cfg.lambda_min_ratio,
            )
        coef = np.empty((z.shape[1], t2.shape[1]))
        for j in range(t2.shape[1]):
            path = cv_lambda_path(z, t2[:, j], cfg, seed=self.seed)
            coef[:, j] = path.theta
        return LinearModel(coef=coef[:, 0] if single else coef)


@dataclass(frozen=True)
class ConstantModel:
    value: np.ndarray  # scalar array or (m,)

    def predict(self, features: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(features).shape[0]
        if self.value.ndim == 0:
            return np.full(n, float(self.value))
        return np.tile(self.value, (n, 1))


class ConstantMeanLearner(Learner):
    """Predicts the training-target mean; useful as a null baseline."""

    supports_multi_target = True

    def fit(self, features, targets):
        t = np.asarray(targets, dtype=np.float64)
        if t.size == 0:
            raise DataError("cannot fit a mean on zero rows")
        return ConstantModel(value=np.asarray(t.mean(axis=0)))


@dataclass(frozen=True)
class FunctionModel:
    fn: object

    def predict(self, features: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(np.atleast_2d(features)), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise DataError("fixed-function learner produced non-finite values")
        return out


class FixedFunctionLearner(Learner):
    """Wraps a known conditional-mean function; ignores the training data.

    This is how oracle means enter the cross-fitting machinery: the
    "fitted" model is the supplied function itself.
    """

    supports_multi_target = True

    def __init__(self, fn):
        self.fn = fn

    def fit(self, features, targets):
        return FunctionModel(fn=self.fn)


def get_learner(name: str, seed: int = 0, cv_folds: int = 10) -> Learner:
    """Look up a sub-task learner by CLI name."""
    if name == "linear":
        return LinearLearner()
    if name == "ridge-cv":
        return RidgeCVLearner(cv_folds=cv_folds, seed=seed)
    if name == "lasso-cv":
        return LassoCVLearner(
            config=PenaltyConfig(cv_folds=cv_folds, n_lambdas=50), seed=seed
        )
    if name == "const":
        return ConstantMeanLearner()
    raise DataError(f"unknown learner '{name}'")
