"""Cross-fitted proxy cross-terms and the modular estimators.

The estimators here minimize an objective whose quadratic (or convex
potential) part is the usual empirical one, but whose linear part uses a
proxy for the cross moment E[XY] built from conditional-mean sub-task
models. With the identity plug-in the proxy collapses to the sample cross
moment and every estimator reduces to its classical counterpart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset, FoldAssignment, split_folds
from .errors import (
    ConvergenceError,
    DataError,
    ModregError,
    SeparationError,
)
from .learners import Learner, solve_spd

CROSS_TERM_KINDS = ("lm", "struct", "miss", "part", "identity")


@dataclass(frozen=True)
class CrossFitPredictions:
    """Out-of-fold predictions of E[X|Z] and E[Y|Z] for every row.

    Row i's entries come from models fitted on the complement of row i's
    fold in ``plan``.
    """

    mu_x_hat: np.ndarray
    mu_y_hat: np.ndarray
    plan: FoldAssignment

    def __post_init__(self):
        mx = np.asarray(self.mu_x_hat, dtype=np.float64)
        my = np.asarray(self.mu_y_hat, dtype=np.float64).ravel()
        if mx.ndim != 2:
            raise DataError("mu_x_hat must be a matrix")
        if mx.shape[0] != my.shape[0] or mx.shape[0] != self.plan.n:
            raise DataError("cross-fit predictions disagree with the fold plan")
        if not (np.all(np.isfinite(mx)) and np.all(np.isfinite(my))):
            raise DataError("cross-fit predictions contain non-finite values")
        object.__setattr__(self, "mu_x_hat", mx)
        object.__setattr__(self, "mu_y_hat", my)


@dataclass(frozen=True)
class ProxyCrossTerm:
    """A proxy for E[XY] with provenance.

    ``row_contributions`` (when available) holds the per-row vectors whose
    term-wise means assemble ``c_hat``; covariance estimation reuses them
    instead of re-deriving the formula.
    """

    c_hat: np.ndarray
    kind: str
    row_contributions: np.ndarray | None = None
    partition: object | None = None  # StructurePartition, when learned
    fusion_parts: object | None = None  # FusionTermRows, for miss/part kinds

    def __post_init__(self):
        c = np.asarray(self.c_hat, dtype=np.float64).ravel()
        if not np.all(np.isfinite(c)):
            raise DataError("cross-term contains non-finite values")
        if self.kind not in CROSS_TERM_KINDS:
            raise DataError(f"unknown cross-term kind '{self.kind}'")
        object.__setattr__(self, "c_hat", c)
        if self.row_contributions is not None:
            rows = np.asarray(self.row_contributions, dtype=np.float64)
            if rows.ndim != 2 or rows.shape[1] != c.shape[0]:
                raise DataError("row contributions do not conform to c_hat")
            object.__setattr__(self, "row_contributions", rows)

    @property
    def p_x(self) -> int:
        return self.c_hat.shape[0]


@dataclass(frozen=True)
class ModularFit:
    """A fitted estimator: coefficients plus optional covariance and path."""

    theta_hat: np.ndarray
    estimator_tag: str
    objective_value: float
    n: int
    covariance: np.ndarray | None = None
    path: object | None = None  # LambdaPath for penalized fits
    partition: object | None = None

    def __post_init__(self):
        t = np.asarray(self.theta_hat, dtype=np.float64).ravel()
        object.__setattr__(self, "theta_hat", t)
        if self.covariance is not None:
            cov = np.asarray(self.covariance, dtype=np.float64)
            if cov.shape != (t.size, t.size):
                raise DataError("covariance does not conform to theta_hat")
            if not np.allclose(cov, cov.T, atol=1e-8):
                raise DataError("covariance must be symmetric")
            object.__setattr__(self, "covariance", cov)

    @property
    def p_x(self) -> int:
        return self.theta_hat.shape[0]

    def standard_errors(self) -> np.ndarray | None:
        """Asymptotic standard errors sqrt(diag(cov)/n), if available."""
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None) / self.n)

    def to_dict(self) -> dict:
        out = {
            "theta": [float(v) for v in self.theta_hat],
            "covariance": None
            if self.covariance is None
            else [[float(v) for v in row] for row in self.covariance],
            "tag": self.estimator_tag,
            "n": int(self.n),
            "p_x": int(self.p_x),
        }
        if self.path is not None:
            out["lambda"] = float(self.path.chosen_lambda)
            out["cv_rule"] = self.path.rule
        if self.partition is not None:
            out["partition"] = {
                "j1": [int(j) for j in self.partition.j1],
                "j2": [int(j) for j in self.partition.j2],
            }
        return out

    def to_json(self, path: str | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


# ---------------------------------------------------------------------------
# Cross-fitting
# ---------------------------------------------------------------------------


def _fit_with_context(learner: Learner, feats, targs, fold: int, label: str):
    try:
        return learner.fit(feats, targs)
    except ModregError as exc:
        exc.args = (f"sub-task fit failed on fold {fold} ({label}): {exc}",)
        raise


def _predict_block(learner, model_or_models, feats, multi: bool):
    if multi:
        out = np.asarray(model_or_models.predict(feats), dtype=np.float64)
        return out[:, None] if out.ndim == 1 else out
    cols = [np.asarray(m.predict(feats), dtype=np.float64).ravel() for m in model_or_models]
    return np.column_stack(cols)


def crossfit_means(
    d: Dataset,
    learner_x: Learner,
    learner_y: Learner,
    folds: FoldAssignment,
) -> CrossFitPredictions:
    """Fit the conditional-mean sub-tasks out of fold.

    For each fold k, mu_x and mu_y models are trained on the complement
    and evaluated on fold k, giving every row predictions from models
    that never saw it. mu_x is one regression per X column; learners
    marked multi-target solve the columns jointly (the fits are
    column-separable for the linear learners shipped here).
    """
    d.require("x", "z", "y")
    if d.p_z < 1:
        raise DataError("cross-fitting needs at least one auxiliary column")
    if folds.n != d.n:
        raise DataError("fold plan does not match dataset rows")
    mu_x = np.empty((d.n, d.p_x))
    mu_y = np.empty(d.n)
    for k in range(1, folds.k + 1):
        tr = folds.rows_outside_fold(k)
        va = folds.rows_in_fold(k)
        if tr.size == 0:
            raise DataError(f"fold {k} has an empty training complement")
        if learner_x.supports_multi_target:
            mx = _fit_with_context(learner_x, d.z[tr], d.x[tr], k, "mu_x")
            mu_x[va] = _predict_block(learner_x, mx, d.z[va], multi=True)
        else:
            models = [
                _fit_with_context(learner_x, d.z[tr], d.x[tr, j], k, f"mu_x[{j}]")
                for j in range(d.p_x)
            ]
            mu_x[va] = _predict_block(learner_x, models, d.z[va], multi=False)
        my = _fit_with_context(learner_y, d.z[tr], d.y[tr], k, "mu_y")
        mu_y[va] = np.asarray(my.predict(d.z[va]), dtype=np.float64).ravel()
    return CrossFitPredictions(mu_x_hat=mu_x, mu_y_hat=mu_y, plan=folds)


# ---------------------------------------------------------------------------
# Cross-terms
# ---------------------------------------------------------------------------


def _three_term_rows(x, y, mu_x, mu_y) -> np.ndarray:
    return x * mu_y[:, None] + mu_x * y[:, None] - mu_x * mu_y[:, None]


def _three_term_mean(x, y, mu_x, mu_y) -> np.ndarray:
    # term-wise means so that the fusion estimators, which average each
    # term over different row sets, reduce to this bit-for-bit
    t1 = (x * mu_y[:, None]).mean(axis=0)
    t2 = (mu_x * y[:, None]).mean(axis=0)
    t3 = (mu_x * mu_y[:, None]).mean(axis=0)
    return t1 + t2 - t3


def proxy_cross_term_identity(d: Dataset) -> ProxyCrossTerm:
    """The non-modular plug-in: c_hat is exactly the sample mean of X_i Y_i."""
    d.require("x", "y")
    rows = d.x * d.y[:, None]
    return ProxyCrossTerm(c_hat=rows.mean(axis=0), kind="identity", row_contributions=rows)


def proxy_cross_term_lm(d: Dataset, preds: CrossFitPredictions) -> ProxyCrossTerm:
    """Three-term proxy cross-term from cross-fitted conditional means."""
    d.require("x", "y")
    if preds.mu_x_hat.shape != d.x.shape:
        raise DataError(
            f"mu_x_hat is {preds.mu_x_hat.shape}, expected {d.x.shape}"
        )
    if preds.mu_y_hat.shape[0] != d.n:
        raise DataError("mu_y_hat does not conform to the dataset")
    rows = _three_term_rows(d.x, d.y, preds.mu_x_hat, preds.mu_y_hat)
    c_hat = _three_term_mean(d.x, d.y, preds.mu_x_hat, preds.mu_y_hat)
    return ProxyCrossTerm(c_hat=c_hat, kind="lm", row_contributions=rows)


# ---------------------------------------------------------------------------
# Modular least squares
# ---------------------------------------------------------------------------


def _score_covariance(gram: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Plug-in covariance of Gram^{-1} score_i (population convention)."""
    phi = solve_spd(gram, scores.T).T
    centered = phi - phi.mean(axis=0)
    cov = centered.T @ centered / scores.shape[0]
    return (cov + cov.T) / 2.0


def modular_ols(d: Dataset, c: ProxyCrossTerm) -> ModularFit:
    """Solve the modular least squares problem theta = Gram^{-1} c_hat.

    When per-row contributions are available the plug-in influence
    covariance is attached; with an identity cross-term it equals the
    classical OLS sandwich.
    """
    d.require("x")
    if c.p_x != d.p_x:
        raise DataError(f"cross-term has length {c.p_x}, expected {d.p_x}")
    gram = d.x.T @ d.x / d.n
    theta = solve_spd(gram, c.c_hat)
    cov = None
    if c.row_contributions is not None and c.row_contributions.shape[0] == d.n:
        scores = c.row_contributions - d.x * (d.x @ theta)[:, None]
        cov = _score_covariance(gram, scores)
    objective = float(0.5 * theta @ gram @ theta - c.c_hat @ theta)
    tag = "ols" if c.kind == "identity" else "mod-ols"
    return ModularFit(
        theta_hat=theta,
        estimator_tag=tag,
        objective_value=objective,
        n=d.n,
        covariance=cov,
        partition=c.partition,
    )


def influence_covariance(
    d: Dataset,
    preds: CrossFitPredictions | None,
    theta: np.ndarray,
    which: str = "mod",
) -> np.ndarray:
    """Plug-in covariance of the influence function at ``theta``.

    ``which='ols'`` uses the classical score x(y - x'theta); ``which='mod'``
    uses the modular score (C_i - x x'theta) with C_i built from the
    cross-fitted means in ``preds``.
    """
    d.require("x", "y")
    theta = np.asarray(theta, dtype=np.float64).ravel()
    gram = d.x.T @ d.x / d.n
    if which == "ols":
        rows = d.x * d.y[:, None]
    elif which == "mod":
        if preds is None:
            raise DataError("which='mod' needs cross-fitted predictions")
        rows = proxy_cross_term_lm(d, preds).row_contributions
    else:
        raise DataError(f"which must be 'mod' or 'ols', got '{which}'")
    scores = rows - d.x * (d.x @ theta)[:, None]
    return _score_covariance(gram, scores)


# ---------------------------------------------------------------------------
# Generalized linear families
# ---------------------------------------------------------------------------


def _expit(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * u))


@dataclass(frozen=True)
class GlmFamily:
    """A convex potential psi on the linear predictor u = x'theta.

    The per-observation potential is h(x, theta) = psi(x'theta); its
    theta-gradient is psi'(u) x and its Hessian psi''(u) x x', so psi''
    nonnegative makes every Hessian PSD.
    """

    name: str
    psi: object
    dpsi: object
    ddpsi: object

    def h(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return self.psi(x @ theta)

    def grad_h(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Mean gradient (1/n) sum psi'(u_i) x_i."""
        return x.T @ self.dpsi(x @ theta) / x.shape[0]

    def grad_rows(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return self.dpsi(x @ theta)[:, None] * x

    def hess_h(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Mean Hessian (1/n) sum psi''(u_i) x_i x_i'."""
        w = self.ddpsi(x @ theta)
        return x.T @ (w[:, None] * x) / x.shape[0]


GAUSSIAN = GlmFamily(
    name="gaussian",
    psi=lambda u: 0.5 * u**2,
    dpsi=lambda u: u,
    ddpsi=lambda u: np.ones_like(u),
)

LOGISTIC = GlmFamily(
    name="logistic",
    psi=lambda u: np.logaddexp(0.0, u),
    dpsi=_expit,
    ddpsi=lambda u: _expit(u) * (1.0 - _expit(u)),
)

POISSON = GlmFamily(
    name="poisson",
    psi=np.exp,
    dpsi=np.exp,
    ddpsi=np.exp,
)

FAMILIES = {f.name: f for f in (GAUSSIAN, LOGISTIC, POISSON)}

_ARMIJO = 1e-4
_MAX_NEWTON = 100
_SEPARATION_NORM = 1e3


def modular_glm(
    d: Dataset,
    c: ProxyCrossTerm,
    family: GlmFamily,
    init: np.ndarray | None = None,
) -> ModularFit:
    """Newton solve of min (1/n) sum h(X_i, theta) - c_hat' theta.

    Uses backtracking line search with halving. The sandwich covariance
    H^{-1} Cov(C_i - grad h_i) H^{-1} is attached when per-row
    contributions are available.
    """
    d.require("x")
    if c.p_x != d.p_x:
        raise DataError(f"cross-term has length {c.p_x}, expected {d.p_x}")
    x = d.x
    if family.name == "logistic" and c.kind == "identity":
        if d.y is None or not np.all(np.isin(d.y, (0.0, 1.0))):
            raise DataError("logistic fits with an identity cross-term need y in {0,1}")
    theta = (
        np.zeros(d.p_x)
        if init is None
        else np.array(init, dtype=np.float64).ravel()
    )
    if theta.shape[0] != d.p_x:
        raise DataError("init does not conform to p_x")

    def objective(t):
        vals = family.h(x, t)
        return float(vals.mean() - c.c_hat @ t)

    f_prev = objective(theta)
    f_start = f_prev
    converged = False
    grad = family.grad_h(x, theta) - c.c_hat
    for _ in range(_MAX_NEWTON):
        if np.max(np.abs(grad)) <= 1e-8:
            converged = True
            break
        hess = family.hess_h(x, theta)
        direction = solve_spd(hess, -grad)
        slope = float(grad @ direction)
        step = 1.0
        accepted = False
        for _ in range(60):
            cand = theta + step * direction
            f_cand = objective(cand)
            if np.isfinite(f_cand) and f_cand <= f_prev + _ARMIJO * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise ConvergenceError(
                "line search failed in the Newton solver",
                last_iterate=theta,
                kkt_residual=float(np.max(np.abs(grad))),
            )
        theta = cand
        f_prev = f_cand
        grad = family.grad_h(x, theta) - c.c_hat
        if (
            family.name == "logistic"
            and np.linalg.norm(theta) > _SEPARATION_NORM
            and f_cand < f_start
        ):
            raise SeparationError(
                "logistic fit is diverging (likely separation); "
                "consider regularizing or rescaling the design"
            )
    if not converged and np.max(np.abs(grad)) > 1e-8:
        raise ConvergenceError(
            f"Newton did not converge in {_MAX_NEWTON} steps",
            last_iterate=theta,
            kkt_residual=float(np.max(np.abs(grad))),
        )

    cov = None
    if c.row_contributions is not None and c.row_contributions.shape[0] == d.n:
        scores = c.row_contributions - family.grad_rows(x, theta)
        hess = family.hess_h(x, theta)
        cov = _score_covariance(hess, scores)
    tag = "glm" if c.kind == "identity" else "mod-glm"
    return ModularFit(
        theta_hat=theta,
        estimator_tag=tag,
        objective_value=f_prev,
        n=d.n,
        covariance=cov,
        partition=c.partition,
    )


def default_folds(d: Dataset, k: int = 2, seed: int = 0) -> FoldAssignment:
    """Convenience wrapper: fold plan sized to the dataset."""
    return split_folds(d.n, k, seed)
