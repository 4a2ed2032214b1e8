"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
pass/fail lines and timings.
"""

import time

import numpy as np
import pytest

from modreg import (
    Dataset,
    FixedFunctionLearner,
    FusionDataset,
    GAUSSIAN,
    LinearLearner,
    PenaltyConfig,
    ProjectionOperator,
    SimConfig,
    crossfit_means,
    fit_ols,
    fusion_fit,
    generate,
    influence_covariance,
    lasso,
    learn_structure,
    modular_glm,
    modular_lasso,
    modular_ols,
    oracle_means,
    projection_shortcut,
    proxy_cross_term_identity,
    proxy_cross_term_lm,
    proxy_cross_term_part,
    proxy_cross_term_miss,
    proxy_cross_term_struct,
    run_study,
    solve_l1_quadratic,
    split_folds,
)
from modreg.learners import _kkt_residual

from oracles import mc_se, prox_gradient_l1


def report(criterion: str, ok: bool, detail: str, t0: float) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance {criterion}] {status} ({time.perf_counter() - t0:.1f}s) {detail}")
    assert ok, f"acceptance {criterion} failed: {detail}"


def random_regression(rng, n=60, p=5):
    x = rng.normal(size=(n, p))
    beta = rng.normal(size=p)
    y = x @ beta + rng.normal(size=n)
    return x, y


@pytest.fixture(scope="module")
def remark1_mc():
    """Shared Monte Carlo for criteria 2 and 8: the scalar chain DGP."""
    n, reps = 2000, 2000
    th_ols = np.empty(reps)
    th_mod = np.empty(reps)
    covered = np.zeros(reps, dtype=bool)
    base = SimConfig(setting="remark1", n=n, n_test=10, seed=0)
    mu_x, mu_y = oracle_means(base)
    lx, ly = FixedFunctionLearner(mu_x), FixedFunctionLearner(mu_y)
    star = float(base.theta_star()[0])
    for rep in range(reps):
        config = SimConfig(setting="remark1", n=n, n_test=10, seed=rep)
        train, _, _ = generate(config)
        th_ols[rep] = fit_ols(train.x, train.y).coef[0]
        preds = crossfit_means(train, lx, ly, split_folds(n, 2, rep))
        fit = modular_ols(train, proxy_cross_term_lm(train, preds))
        th_mod[rep] = fit.theta_hat[0]
        cov = influence_covariance(train, preds, fit.theta_hat, which="mod")
        half = 1.96 * np.sqrt(cov[0, 0] / n)
        covered[rep] = abs(fit.theta_hat[0] - star) <= half
    return {"n": n, "star": star, "ols": th_ols, "mod": th_mod, "covered": covered}


class TestCriterion1Collapse:
    def test_collapse_suite(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(101)
        cfg = PenaltyConfig(cv_folds=3, n_lambdas=20)
        worst = 0.0
        for i in range(20):
            x, y = random_regression(rng, n=60, p=5)
            z = rng.normal(size=(60, 3))
            d = Dataset(x=x, z=z, y=y)

            # mod-OLS with identity plug-in vs OLS
            fit_mod = modular_ols(d, proxy_cross_term_identity(d))
            gap = np.abs(fit_mod.theta_hat - fit_ols(x, y).coef).max()
            worst = max(worst, gap)

            # modular Lasso with identity cross-term vs Lasso
            f_lasso = lasso(d, cfg, seed=i)
            f_modlasso = modular_lasso(d, proxy_cross_term_identity(d), cfg, seed=i)
            worst = max(
                worst, np.abs(f_lasso.path.coefs - f_modlasso.path.coefs).max()
            )

            # gaussian modular GLM vs OLS
            f_glm = modular_glm(d, proxy_cross_term_identity(d), GAUSSIAN)
            worst = max(worst, np.abs(f_glm.theta_hat - fit_ols(x, y).coef).max())

            # fusion with empty pair blocks vs triples-only estimator
            fd = FusionDataset(triples=d)
            lx = ly = LinearLearner()
            c_part = proxy_cross_term_part(fd, lx, ly, seed=i)
            preds = crossfit_means(d, lx, ly, split_folds(60, 2, i))
            c_lm = proxy_cross_term_lm(d, preds)
            assert np.array_equal(c_part.c_hat, c_lm.c_hat)  # bit-identical
            gap = np.abs(
                fusion_fit(fd, c_part).theta_hat - modular_ols(d, c_lm).theta_hat
            ).max()
            worst = max(worst, gap)

            # projection shortcut with identity smoothers vs Lasso
            eye_op = ProjectionOperator.fixed(np.eye(60))
            f_proj = projection_shortcut(d, eye_op, eye_op, cfg, seed=i)
            worst = max(worst, np.abs(f_proj.theta_hat - f_lasso.theta_hat).max())
        report("1 collapse-suite", worst <= 1e-8, f"max coefficient gap {worst:.2e}", t0)


class TestCriterion2Remark1Variance:
    def test_asymptotic_variances(self, remark1_mc):
        t0 = time.perf_counter()
        n = remark1_mc["n"]
        v_ols = n * remark1_mc["ols"].var()
        v_mod = n * remark1_mc["mod"].var()
        ok = abs(v_ols - 2.0) <= 0.2 and abs(v_mod - 1.5) <= 0.15
        report(
            "2 remark1-variance",
            ok,
            f"n*Var: ols {v_ols:.3f} (target 2.0+-10%), mod {v_mod:.3f} (target 1.5+-10%)",
            t0,
        )


class TestCriterion3SolverOracle:
    def test_prox_gradient_agreement_and_kkt(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(103)
        worst_gap = 0.0
        worst_kkt_rel = 0.0
        for _ in range(10):
            p = int(rng.integers(2, 6))
            a = rng.normal(size=(30, p))
            G = a.T @ a / 30
            c = rng.normal(size=p)
            lam_max = float(np.abs(c).max())
            grid = np.geomspace(lam_max, 0.01 * lam_max, 12)
            theta = np.zeros(p)
            for lam in grid:
                theta = solve_l1_quadratic(G, c, float(lam), warm_start=theta)
                kkt = _kkt_residual(G, c, float(lam), theta)
                worst_kkt_rel = max(worst_kkt_rel, kkt / max(1.0, np.abs(c).max()))
            lam_mid = 0.3 * lam_max
            ours = solve_l1_quadratic(G, c, lam_mid)
            oracle = prox_gradient_l1(G, c, lam_mid, tol=1e-14)
            worst_gap = max(worst_gap, float(np.abs(ours - oracle).max()))
        ok = worst_gap <= 1e-4 and worst_kkt_rel <= 1e-6
        report(
            "3 solver-oracle",
            ok,
            f"max gap vs prox oracle {worst_gap:.2e}, max relative KKT {worst_kkt_rel:.2e}",
            t0,
        )


class TestCriterion4VarianceDominance:
    def test_score_variances(self):
        t0 = time.perf_counter()
        ok = True
        detail = []
        for seed in range(5):
            config = SimConfig(
                setting="high1", n=5000, n_test=10, seed=seed, p_x=4, p_z=8, s=2
            )
            train, _, star = generate(config)
            mu_x, mu_y = oracle_means(config)
            preds = crossfit_means(
                train,
                FixedFunctionLearner(mu_x),
                FixedFunctionLearner(mu_y),
                split_folds(train.n, 2, seed),
            )
            c = proxy_cross_term_lm(train, preds)
            common = train.x * (train.x @ star)[:, None]
            v_mod = (c.row_contributions - common).var(axis=0)
            v_ols = (train.x * train.y[:, None] - common).var(axis=0)
            ok &= bool(np.all(v_mod <= v_ols))
            detail.append(float((v_ols - v_mod).min()))
        report(
            "4 variance-dominance",
            ok,
            f"min per-coordinate variance slack over 5 seeds {min(detail):.3e}",
            t0,
        )


class TestCriterion5HighdimSetting1:
    def test_excess_risk_ordering(self):
        t0 = time.perf_counter()
        config = SimConfig(setting="high1", n=500, n_test=1000, seed=53)
        result = run_study(
            config,
            ["lasso", "mod-lasso:ridge-cv", "mod-lasso:oracle"],
            n_replicates=20,
            parallelism=1,
            penalty=PenaltyConfig(cv_folds=5, n_lambdas=50),
        )
        agg = result.aggregate()
        r_lasso = agg["lasso"]["mean_excess_risk"]
        r_mod = agg["mod-lasso:ridge-cv"]["mean_excess_risk"]
        r_oracle = agg["mod-lasso:oracle"]["mean_excess_risk"]
        ok = (r_mod < r_lasso) and (r_oracle <= r_mod) and (r_oracle <= r_lasso)
        report(
            "5 highdim-setting1",
            ok,
            f"mean excess risk: lasso {r_lasso:.4f}, modular {r_mod:.4f}, oracle {r_oracle:.4f}",
            t0,
        )


class TestCriterion6Setting2Robustness:
    def test_structured_rmse_wins(self):
        t0 = time.perf_counter()
        config = SimConfig(setting="high2", n=500, n_test=1000, seed=61)
        result = run_study(
            config,
            ["lasso", "mod-lasso:ridge-cv:struct"],
            n_replicates=20,
            parallelism=1,
            penalty=PenaltyConfig(cv_folds=5, n_lambdas=50),
        )
        support = np.flatnonzero(result.theta_star)
        by_rep = {}
        for r in result.records:
            assert not r.failed, r.error
            err = np.linalg.norm((r.theta_hat - result.theta_star)[support])
            by_rep.setdefault(r.replicate, {})[r.estimator] = err
        wins = sum(
            1
            for rep in by_rep.values()
            if rep["mod-lasso:ridge-cv:struct"] < rep["lasso"]
        )
        ok = wins >= 14
        report(
            "6 setting2-robustness",
            ok,
            f"structured modular beats lasso on support RMSE in {wins}/20 replicates",
            t0,
        )


class TestCriterion7FusionUnbiasedness:
    def test_cross_term_means(self):
        t0 = time.perf_counter()
        base = SimConfig(setting="high1", n=10, n_test=10, seed=71, p_x=4, p_z=8, s=2)
        target = base.theta_star()
        mu = oracle_means(base)
        lx, ly = FixedFunctionLearner(mu[0]), FixedFunctionLearner(mu[1])
        c_miss, c_part = [], []
        for rep in range(200):
            config = SimConfig(
                setting="high1", n=15_000, n_test=10, seed=71 ^ (rep + 1),
                p_x=4, p_z=8, s=2, b=base.b,
            )
            train, _, _ = generate(config)
            fd_miss = FusionDataset(
                xz_pairs=Dataset(x=train.x[:5000], z=train.z[:5000]),
                zy_pairs=Dataset(z=train.z[5000:10_000], y=train.y[5000:10_000]),
            )
            c_miss.append(proxy_cross_term_miss(fd_miss, lx, ly, seed=rep).c_hat)
            fd_part = FusionDataset(
                triples=Dataset(
                    x=train.x[10_000:], z=train.z[10_000:], y=train.y[10_000:]
                ),
                xz_pairs=fd_miss.xz_pairs,
                zy_pairs=fd_miss.zy_pairs,
            )
            c_part.append(proxy_cross_term_part(fd_part, lx, ly, seed=rep).c_hat)
        oks = []
        gaps = []
        for name, stack in (("miss", np.stack(c_miss)), ("part", np.stack(c_part))):
            se = mc_se(stack)
            gap = np.abs(stack.mean(axis=0) - target)
            oks.append(bool(np.all(gap <= 4 * se)))
            gaps.append(float((gap / se).max()))
        report(
            "7 fusion-unbiasedness",
            all(oks),
            f"max |mean-E[XY]|/mc-se: miss {gaps[0]:.2f}, part {gaps[1]:.2f} (cap 4)",
            t0,
        )


class TestCriterion8Coverage:
    def test_wald_interval_coverage(self, remark1_mc):
        t0 = time.perf_counter()
        rate = float(remark1_mc["covered"].mean())
        ok = 0.92 <= rate <= 0.98
        report("8 coverage", ok, f"empirical 95% CI coverage {rate:.3f}", t0)


class TestCriterion9Determinism:
    def test_parallelism_invariance(self, tmp_path):
        t0 = time.perf_counter()
        config = SimConfig(setting="low1", n=100, n_test=100, seed=91)
        ests = ["ols", "mod-ols:linear", "mod-ols:ridge-cv"]
        a = run_study(config, ests, n_replicates=8, parallelism=1)
        b = run_study(config, ests, n_replicates=8, parallelism=8)
        fa, fb = tmp_path / "serial.csv", tmp_path / "parallel.csv"
        a.to_csv(str(fa))
        b.to_csv(str(fb))
        ok = fa.read_bytes() == fb.read_bytes()
        report("9 determinism", ok, "serial and 8-way parallel CSVs are byte-identical", t0)
