"""Data-generating processes and a seeded replication harness.

Settings
--------
low1 : X ~ Unif[-1,1]^4, Z = BX + eps_z, Y = Z'gamma + eps_y (linear chain)
low2 : Z ~ Unif[-1,1]^6, X = BZ + eps_z, Y = Z'gamma + eps_y (common cause)
low3 : nonlinear chain; Z mixes affine and indicator maps of X
low4 : nonlinear common cause; X mixes affine and indicator maps of Z
high1: X ~ N(0, I_100), Z = BX + eps_z, Y = Z'gamma + eps_y (sparse B)
high2: high1 plus five direct X effects on Y (breaks X indep Y given Z)
remark1: the scalar chain X -> Z -> Y with adjustable signal and noise

B is drawn once per study from the study seed and reused by every
replicate; replicate r uses seed study_seed XOR r, so a study is fully
determined by (config, estimators, n_replicates) regardless of
parallelism.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Dataset, FusionDataset, split_folds
from .errors import DataError, ModregError
from .fusion import fusion_fit, proxy_cross_term_miss, proxy_cross_term_part
from .highdim import (
    ProjectionOperator,
    cv_projection_etas,
    lasso,
    learn_structure,
    modular_lasso,
    projection_shortcut,
    proxy_cross_term_struct,
)
from .learners import (
    FixedFunctionLearner,
    Learner,
    PenaltyConfig,
    get_learner,
)
from .modular import (
    crossfit_means,
    modular_ols,
    proxy_cross_term_identity,
    proxy_cross_term_lm,
)
from .rng import derive_seed, philox

SETTINGS = ("low1", "low2", "low3", "low4", "high1", "high2", "remark1")

_LOW_GAMMA = (0.531, -0.126, 0.312, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one simulation study.

    Fields left as None are filled in by setting-specific defaults at
    construction; in particular the coefficient matrix ``b`` is realized
    from the study seed and then shared by every replicate.
    """

    setting: str
    n: int = 200
    n_test: int = 1000
    seed: int = 0
    sigma_z: float = 1.0
    sigma_y: float | None = None
    p_x: int | None = None
    p_z: int | None = None
    s: int = 10
    rho: float = 0.0
    b: np.ndarray | None = None
    gamma: np.ndarray | None = None
    gamma_tilde: np.ndarray | None = None
    alpha: float = 1.0
    beta: float = 1.0
    sigma_x: float = 1.0
    sigma_1: float = 1.0
    sigma_2: float = 1.0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise DataError(f"unknown setting '{self.setting}'")
        if self.n < 1 or self.n_test < 1:
            raise DataError("sample sizes must be positive")
        if self.sigma_z <= 0:
            raise DataError("noise standard deviations must be positive")
        low = self.setting.startswith("low")
        high = self.setting.startswith("high")
        if self.p_x is None:
            object.__setattr__(self, "p_x", 1 if self.setting == "remark1" else (4 if low else 100))
        if self.p_z is None:
            object.__setattr__(self, "p_z", 1 if self.setting == "remark1" else (6 if low else 100))
        if self.sigma_y is None:
            object.__setattr__(self, "sigma_y", 2.0 if high else 1.0)
        if self.sigma_y <= 0:
            raise DataError("noise standard deviations must be positive")
        if high and not (self.s <= self.p_x and 2 * self.s <= self.p_z):
            raise DataError("high settings need s <= p_x and 2s <= p_z")
        bgen = philox(derive_seed(self.seed, 9000))
        if self.gamma is None:
            if high:
                g = np.where(np.arange(self.p_z) < self.s, 0.5, 0.0)
            else:
                g = np.zeros(self.p_z)
                vals = np.asarray(_LOW_GAMMA)
                g[: min(self.p_z, vals.size)] = vals[: self.p_z]
            object.__setattr__(self, "gamma", g)
        else:
            object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64))
        if self.b is None and self.setting != "remark1":
            object.__setattr__(self, "b", self._draw_b(bgen))
        elif self.b is not None:
            object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64))
        if self.setting == "high2":
            if self.gamma_tilde is None:
                gt = np.zeros(self.p_x)
                free = np.arange(self.s, self.p_x)
                chosen = bgen.choice(free, size=min(5, free.size), replace=False)
                gt[np.sort(chosen)] = 0.5
                object.__setattr__(self, "gamma_tilde", gt)
            else:
                object.__setattr__(
                    self, "gamma_tilde", np.asarray(self.gamma_tilde, dtype=np.float64)
                )

    def _draw_b(self, rng: np.random.Generator) -> np.ndarray:
        if self.setting in ("low1", "low3"):
            shape = (self.p_z, self.p_x)  # chain: Z = BX
            b = np.zeros(shape)
            idx = rng.choice(shape[0] * shape[1], size=8, replace=False)
            b.flat[np.sort(idx)] = 0.5
            return b
        if self.setting in ("low2", "low4"):
            shape = (self.p_x, self.p_z)  # common cause: X = BZ
            b = np.zeros(shape)
            idx = rng.choice(shape[0] * shape[1], size=8, replace=False)
            b.flat[np.sort(idx)] = 0.5
            return b
        # high settings: columns j < s get 2s random rows set to 0.25
        b = np.zeros((self.p_z, self.p_x))
        for j in range(self.s):
            rows = rng.choice(self.p_z, size=2 * self.s, replace=False)
            b[np.sort(rows), j] = 0.25
        return b

    def theta_star(self) -> np.ndarray | None:
        """Population OLS coefficient, when available in closed form."""
        if self.setting == "remark1":
            return np.array([self.alpha * self.beta])
        if self.setting in ("low1", "high1"):
            return self.b.T @ self.gamma
        if self.setting == "high2":
            return self.b.T @ self.gamma + self.gamma_tilde
        if self.setting == "low2":
            var_x = self.b @ self.b.T / 3.0 + self.sigma_z**2 * np.eye(self.p_x)
            cov_xy = self.b @ self.gamma / 3.0
            return np.linalg.solve(var_x, cov_xy)
        return None  # low3/low4: use numeric_theta_star

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("b", "gamma", "gamma_tilde"):
            if out[key] is not None:
                out[key] = np.asarray(out[key]).tolist()
        return out


def _nonlinear_z_of_x(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    z = np.empty((x.shape[0], b.shape[0]))
    z[:, 0] = 0.5 * x[:, 0] + (x[:, 0] > 0)
    z[:, 1] = -0.5 * x[:, 2] + (x[:, 3] > 0)
    z[:, 2] = (x[:, 3] > 0).astype(np.float64)
    z[:, 3:] = (x @ b.T)[:, 3:]
    return z


def _nonlinear_x_of_z(z: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.empty((z.shape[0], b.shape[0]))
    x[:, 0] = 0.5 * z[:, 0] + (z[:, 0] > 0)
    x[:, 1] = -0.5 * z[:, 2] + (z[:, 3] > 0)
    x[:, 2] = (z[:, 3] > 0).astype(np.float64)
    x[:, 3] = (z @ b.T)[:, 3]
    return x


def _nonlinear_g(z: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    # indicator bend on the first auxiliary keeps E[Y|Z] nonlinear
    return z @ gamma + (z[:, 0] > 0)


def _sample(config: SimConfig, rng: np.random.Generator, n: int, y_noise: bool = True):
    s = config.setting
    sy = config.sigma_y if y_noise else 0.0
    if s == "remark1":
        x = config.sigma_x * rng.standard_normal((n, 1))
        z = config.alpha * x + config.sigma_1 * rng.standard_normal((n, 1))
        noise = config.sigma_2 * rng.standard_normal(n) if y_noise else 0.0
        y = config.beta * z[:, 0] + noise
        return x, z, y
    if s in ("low1", "low3"):
        x = rng.uniform(-1.0, 1.0, size=(n, config.p_x))
        mean_z = x @ config.b.T if s == "low1" else _nonlinear_z_of_x(x, config.b)
        z = mean_z + config.sigma_z * rng.standard_normal((n, config.p_z))
        mean_y = z @ config.gamma if s == "low1" else _nonlinear_g(z, config.gamma)
        return x, z, mean_y + sy * rng.standard_normal(n)
    if s in ("low2", "low4"):
        z = rng.uniform(-1.0, 1.0, size=(n, config.p_z))
        mean_x = z @ config.b.T if s == "low2" else _nonlinear_x_of_z(z, config.b)
        x = mean_x + config.sigma_z * rng.standard_normal((n, config.p_x))
        mean_y = z @ config.gamma if s == "low2" else _nonlinear_g(z, config.gamma)
        return x, z, mean_y + sy * rng.standard_normal(n)
    # high1 / high2
    x = rng.standard_normal((n, config.p_x))
    z = x @ config.b.T + config.sigma_z * rng.standard_normal((n, config.p_z))
    y = z @ config.gamma + sy * rng.standard_normal(n)
    if s == "high2":
        y = y + x @ config.gamma_tilde
    return x, z, y


def generate(config: SimConfig):
    """Draw one replicate: (train, test, theta_star-or-None).

    With ``rho > 0`` the training data is a FusionDataset whose pair
    blocks each hold round(rho * n) rows; otherwise it is a plain
    Dataset of n joint rows. The test set always has joint rows.
    """
    rng = philox(config.seed)
    n_pair = int(round(config.rho * config.n)) if config.rho > 0 else 0
    n_total = config.n + 2 * n_pair
    x, z, y = _sample(config, rng, n_total)
    xt, zt, yt = _sample(config, rng, config.n_test)
    test = Dataset(x=xt, z=zt, y=yt)
    if n_pair == 0:
        train = Dataset(x=x, z=z, y=y)
    else:
        i1 = config.n
        i2 = config.n + n_pair
        train = FusionDataset(
            triples=Dataset(x=x[:i1], z=z[:i1], y=y[:i1]),
            xz_pairs=Dataset(x=x[i1:i2], z=z[i1:i2]),
            zy_pairs=Dataset(z=z[i2:], y=y[i2:]),
        )
    return train, test, config.theta_star()


def oracle_means(config: SimConfig):
    """Closed-form conditional means (mu_x, mu_y) for Gaussian/linear DGPs.

    Available for remark1, low2, high1, and high2. The uniform-X and
    nonlinear settings have no closed form and raise DataError.
    """
    s = config.setting
    if s == "remark1":
        slope = (
            config.alpha
            * config.sigma_x**2
            / (config.alpha**2 * config.sigma_x**2 + config.sigma_1**2)
        )
        return (lambda z: slope * z, lambda z: config.beta * z[:, 0])
    if s == "low2":
        return (lambda z: z @ config.b.T, lambda z: z @ config.gamma)
    if s in ("high1", "high2"):
        b = config.b
        var_z = b @ b.T + config.sigma_z**2 * np.eye(config.p_z)
        a = np.linalg.solve(var_z, b).T  # p_x-by-p_z map z -> E[X|Z=z]
        if s == "high1":
            return (lambda z: z @ a.T, lambda z: z @ config.gamma)
        gt = config.gamma_tilde
        return (lambda z: z @ a.T, lambda z: z @ config.gamma + (z @ a.T) @ gt)
    raise DataError(f"setting '{s}' has no closed-form conditional means")


@dataclass(frozen=True)
class NumericThetaStar:
    theta: np.ndarray
    mc_se: np.ndarray
    n_oracle: int


def numeric_theta_star(
    config: SimConfig, n_oracle: int = 1_000_000, batch: int = 100_000
) -> NumericThetaStar:
    """Monte Carlo estimate of the population OLS coefficient.

    Streams noise-free draws (the additive response noise is dropped; it
    does not move the moments) in batches, accumulating E[XX'] and E[XY],
    then makes a second deterministic pass for the influence-function
    standard errors. Identical output for identical (config, n_oracle).
    """
    if n_oracle < 1:
        raise DataError("n_oracle must be positive")
    seed = derive_seed(config.seed, 777)
    p = config.p_x
    gram = np.zeros((p, p))
    cross = np.zeros(p)
    rng = philox(seed)
    done = 0
    while done < n_oracle:
        m = min(batch, n_oracle - done)
        x, _, y = _sample(config, rng, m, y_noise=False)
        gram += x.T @ x
        cross += x.T @ y
        done += m
    gram /= n_oracle
    cross /= n_oracle
    theta = np.linalg.solve(gram, cross)

    score_sum = np.zeros(p)
    score_sq = np.zeros((p, p))
    rng = philox(seed)
    done = 0
    while done < n_oracle:
        m = min(batch, n_oracle - done)
        x, _, y = _sample(config, rng, m, y_noise=False)
        s = x * (y - x @ theta)[:, None]
        score_sum += s.sum(axis=0)
        score_sq += s.T @ s
        done += m
    mean_s = score_sum / n_oracle
    cov_s = score_sq / n_oracle - np.outer(mean_s, mean_s)
    gram_inv = np.linalg.inv(gram)
    mc_se = np.sqrt(np.clip(np.diag(gram_inv @ cov_s @ gram_inv), 0, None) / n_oracle)
    return NumericThetaStar(theta=theta, mc_se=mc_se, n_oracle=n_oracle)


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

_PLUGIN_NAMES = ("identity", "oracle", "linear", "ridge-cv", "lasso-cv", "const")


def _sub_task_learners(plugin: str, config: SimConfig, seed: int):
    if plugin == "oracle":
        mu_x, mu_y = oracle_means(config)
        return FixedFunctionLearner(mu_x), FixedFunctionLearner(mu_y)
    lx = get_learner(plugin, seed=derive_seed(seed, 11), cv_folds=5)
    ly = get_learner(plugin, seed=derive_seed(seed, 12), cv_folds=5)
    return lx, ly


def _triples_of(train) -> Dataset:
    if isinstance(train, FusionDataset):
        if train.triples is None:
            raise DataError("estimator needs joint observations")
        return train.triples
    return train


def estimate(spec: str, train, config: SimConfig, penalty: PenaltyConfig, seed: int):
    """Run one named estimator on one replicate's training data.

    Spec grammar: 'ols' | 'lasso' | 'mod-ols:<mu>' | 'mod-lasso:<mu>' |
    'mod-lasso:<mu>:struct' | 'proj:cv' | 'proj:<eta_x>:<eta_y>' where
    <mu> is identity, oracle, linear, ridge-cv, lasso-cv, or const.
    """
    parts = spec.split(":")
    head = parts[0]
    if head == "ols":
        d = _triples_of(train)
        return modular_ols(d, proxy_cross_term_identity(d)).theta_hat
    if head == "lasso":
        d = _triples_of(train)
        return lasso(d, penalty, seed=seed).theta_hat
    if head in ("mod-ols", "mod-lasso"):
        if len(parts) < 2 or parts[1] not in _PLUGIN_NAMES:
            raise DataError(f"estimator '{spec}' needs a sub-task plug-in name")
        plugin = parts[1]
        structured = len(parts) > 2 and parts[2] == "struct"
        if isinstance(train, FusionDataset) and not (
            train.n_xz == 0 and train.n_yz == 0
        ):
            if plugin == "identity":
                raise DataError("identity plug-in needs joint observations only")
            lx, ly = _sub_task_learners(plugin, config, seed)
            partition = None
            if structured:
                partition = learn_structure(
                    _triples_of(train), PenaltyConfig(cv_rule="1se", cv_folds=5), seed
                )
            if train.triples is None:
                c = proxy_cross_term_miss(train, lx, ly, seed)
            else:
                c = proxy_cross_term_part(train, lx, ly, seed, partition=partition)
            pen = penalty if head == "mod-lasso" else None
            return fusion_fit(train, c, pen, seed).theta_hat
        d = _triples_of(train)
        if plugin == "identity":
            c = proxy_cross_term_identity(d)
        else:
            lx, ly = _sub_task_learners(plugin, config, seed)
            folds = split_folds(d.n, 2, seed)
            if structured:
                partition = learn_structure(
                    d, PenaltyConfig(cv_rule="1se", cv_folds=5), seed
                )
                c = proxy_cross_term_struct(d, partition, lx, ly, folds)
            else:
                c = proxy_cross_term_lm(d, crossfit_means(d, lx, ly, folds))
        if head == "mod-ols":
            return modular_ols(d, c).theta_hat
        return modular_lasso(d, c, penalty, seed=seed).theta_hat
    if head == "proj":
        d = _triples_of(train)
        if len(parts) == 2 and parts[1] == "cv":
            base = max(float(np.trace(d.z.T @ d.z)) / d.p_z, 1e-8)
            grid = base * np.geomspace(1e-3, 1e2, 6)
            _, _, fit = cv_projection_etas(d, grid, grid, penalty, seed)
            return fit.theta_hat
        if len(parts) == 3:
            ex, ey = float(parts[1]), float(parts[2])
            fit = projection_shortcut(
                d,
                ProjectionOperator.ridge_hat(d.z, ex),
                ProjectionOperator.ridge_hat(d.z, ey),
                penalty,
                seed,
            )
            return fit.theta_hat
        raise DataError(f"estimator '{spec}' must be proj:cv or proj:<eta_x>:<eta_y>")
    raise DataError(f"unknown estimator spec '{spec}'")


# ---------------------------------------------------------------------------
# Study runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReplicateRecord:
    replicate: int
    estimator: str
    theta_hat: np.ndarray | None
    excess_risk: float
    mse: float
    runtime_ms: float
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class SimResult:
    """Per-replicate records plus per-estimator aggregates."""

    config: SimConfig
    estimators: tuple[str, ...]
    theta_star: np.ndarray
    records: tuple[ReplicateRecord, ...]

    def aggregate(self) -> dict:
        out = {}
        for est in self.estimators:
            recs = [r for r in self.records if r.estimator == est and not r.failed]
            failures = sum(
                1 for r in self.records if r.estimator == est and r.failed
            )
            entry = {"replicates": len(recs), "failures": failures}
            if recs:
                thetas = np.stack([r.theta_hat for r in recs])
                err = thetas - self.theta_star[None, :]
                bias = err.mean(axis=0)
                sd = err.std(axis=0)  # population convention
                rmse = np.sqrt((err**2).mean(axis=0))
                entry.update(
                    rmse_per_coord=rmse.tolist(),
                    bias_per_coord=bias.tolist(),
                    sd_per_coord=sd.tolist(),
                    mean_excess_risk=float(np.mean([r.excess_risk for r in recs])),
                    mean_mse=float(np.mean([r.mse for r in recs])),
                    mean_runtime_ms=float(np.mean([r.runtime_ms for r in recs])),
                )
            out[est] = entry
        return out

    def to_csv(self, path: str) -> None:
        """Tidy per-replicate CSV; wall-clock columns are excluded so the
        bytes depend only on (config, estimators, replicates)."""
        p = self.theta_star.shape[0]
        header = ["replicate", "estimator", "failed", "excess_risk", "mse"] + [
            f"theta_{j + 1}" for j in range(p)
        ]
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for r in self.records:
                cells = [str(r.replicate), r.estimator, str(int(r.failed))]
                cells.append("nan" if r.failed else repr(float(r.excess_risk)))
                cells.append("nan" if r.failed else repr(float(r.mse)))
                if r.failed:
                    cells.extend(["nan"] * p)
                else:
                    cells.extend(repr(float(v)) for v in r.theta_hat)
                fh.write(",".join(cells) + "\n")

    def summary_json(self, path: str | None = None) -> str:
        payload = {
            "config": self.config.to_dict(),
            "estimators": list(self.estimators),
            "theta_star": self.theta_star.tolist(),
            "aggregate": self.aggregate(),
        }
        text = json.dumps(payload, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def _run_replicate(args) -> list[ReplicateRecord]:
    config, estimators, penalty, theta_star, rep = args
    rep_seed = config.seed ^ rep
    rep_config = dataclasses.replace(config, seed=rep_seed)
    train, test, _ = generate(rep_config)
    records = []
    for spec in estimators:
        t0 = time.perf_counter()
        try:
            theta = estimate(spec, train, rep_config, penalty, rep_seed)
            ms = (time.perf_counter() - t0) * 1000.0
            gap = test.x @ (theta - theta_star)
            records.append(
                ReplicateRecord(
                    replicate=rep,
                    estimator=spec,
                    theta_hat=theta,
                    excess_risk=float(np.mean(gap**2)),
                    mse=float(np.mean((test.x @ theta - test.y) ** 2)),
                    runtime_ms=ms,
                )
            )
        except ModregError as exc:
            ms = (time.perf_counter() - t0) * 1000.0
            records.append(
                ReplicateRecord(
                    replicate=rep,
                    estimator=spec,
                    theta_hat=None,
                    excess_risk=float("nan"),
                    mse=float("nan"),
                    runtime_ms=ms,
                    error=str(exc),
                )
            )
    return records


def run_study(
    config: SimConfig,
    estimators: list[str],
    n_replicates: int,
    parallelism: int = 1,
    penalty: PenaltyConfig | None = None,
    log=None,
) -> SimResult:
    """Run every estimator on ``n_replicates`` independent replicates.

    Replicate r draws from seed ``config.seed ^ r``; all estimators see
    identical data within a replicate. Failures are recorded and the
    study continues. Results are identical for any ``parallelism``.
    """
    if n_replicates < 2:
        raise DataError("a study needs at least 2 replicates")
    penalty = penalty or PenaltyConfig()
    star = config.theta_star()
    if star is None:
        star = numeric_theta_star(config).theta
    jobs = [
        (config, tuple(estimators), penalty, star, rep) for rep in range(n_replicates)
    ]
    records: list[ReplicateRecord] = []
    if parallelism <= 1:
        chunks = map(_run_replicate, jobs)
        for rep, chunk in enumerate(chunks):
            records.extend(chunk)
            if log is not None:
                log(f"replicate {rep + 1}/{n_replicates} done")
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            for rep, chunk in enumerate(pool.map(_run_replicate, jobs)):
                records.extend(chunk)
                if log is not None:
                    log(f"replicate {rep + 1}/{n_replicates} done")
    return SimResult(
        config=config,
        estimators=tuple(estimators),
        theta_star=star,
        records=tuple(records),
    )
