"""DGP generators, the numeric population-coefficient oracle, the runner."""

import dataclasses

import numpy as np
import pytest

from modreg import (
    DataError,
    FusionDataset,
    PenaltyConfig,
    SimConfig,
    generate,
    numeric_theta_star,
    run_study,
)

from oracles import mc_se


class TestSimConfig:
    def test_unknown_setting(self):
        with pytest.raises(DataError):
            SimConfig(setting="medium1")

    def test_high_dimension_consistency(self):
        with pytest.raises(DataError, match="2s"):
            SimConfig(setting="high1", p_x=10, p_z=10, s=8)

    def test_b_fixed_across_replicates(self):
        config = SimConfig(setting="low1", seed=4)
        rep = dataclasses.replace(config, seed=config.seed ^ 3)
        np.testing.assert_array_equal(config.b, rep.b)

    def test_low_b_pattern(self):
        config = SimConfig(setting="low1", seed=8)
        assert config.b.shape == (6, 4)
        assert np.count_nonzero(config.b) == 8
        assert set(np.unique(config.b)) <= {0.0, 0.5}

    def test_noise_must_be_positive(self):
        with pytest.raises(DataError):
            SimConfig(setting="low1", sigma_z=0.0)


class TestGenerate:
    def test_low1_noiseless_limit(self):
        config = SimConfig(setting="low1", n=200, sigma_z=1e-12, sigma_y=1e-12, seed=0)
        train, _, theta_star = generate(config)
        resid = train.y - train.z @ config.gamma
        assert np.abs(resid).max() <= 1e-10
        np.testing.assert_allclose(theta_star, config.b.T @ config.gamma)

    def test_high1_theta_star_structure(self):
        config = SimConfig(setting="high1", n=10, seed=3)
        star = config.theta_star()
        assert np.count_nonzero(star) <= config.s
        for j in range(config.p_x):
            active = np.count_nonzero(config.b[: config.s, j])
            assert star[j] == pytest.approx(0.25 * 0.5 * active)
        assert np.all(star[config.s :] == 0)

    def test_low3_indicator_column_mean(self):
        config = SimConfig(setting="low3", n=10_000, seed=5)
        train, _, _ = generate(config)
        z3 = train.z[:, 2]  # indicator of x_4 > 0 plus noise
        se = z3.std(ddof=1) / np.sqrt(z3.size)
        assert abs(z3.mean() - 0.5) <= 3 * se

    def test_high2_has_direct_effects(self):
        config = SimConfig(setting="high2", n=10, seed=6)
        gt = config.gamma_tilde
        assert np.count_nonzero(gt) == 5
        assert np.all(gt[: config.s] == 0)
        np.testing.assert_allclose(
            config.theta_star(), config.b.T @ config.gamma + gt
        )

    def test_rho_builds_fusion_blocks(self):
        config = SimConfig(setting="low1", n=50, rho=2.0, seed=7)
        train, test, _ = generate(config)
        assert isinstance(train, FusionDataset)
        assert (train.n, train.n_xz, train.n_yz) == (50, 100, 100)
        assert test.x.shape == (config.n_test, 4)

    def test_high1_residual_variance_matches_analytic(self):
        # Var(Y - X'theta*) = gamma'gamma * sigma_z^2 + sigma_y^2 = 6.5
        config = SimConfig(setting="high1", n=50_000, seed=9)
        train, _, star = generate(config)
        resid = train.y - train.x @ star
        v = resid.var(ddof=1)
        se = (resid**2).std(ddof=1) / np.sqrt(resid.size)
        assert abs(v - 6.5) <= 3 * se


class TestNumericThetaStar:
    def test_matches_analytic_on_low1(self):
        config = SimConfig(setting="low1", n=10, seed=11)
        est = numeric_theta_star(config)
        analytic = config.b.T @ config.gamma
        assert np.all(np.abs(est.theta - analytic) <= 3 * est.mc_se)

    def test_zero_signal_gives_zero(self):
        config = SimConfig(setting="low1", n=10, seed=12, gamma=np.zeros(6))
        est = numeric_theta_star(config, n_oracle=400_000)
        assert np.all(np.abs(est.theta) <= 3 * est.mc_se + 1e-12)

    def test_deterministic(self):
        config = SimConfig(setting="low3", n=10, seed=13)
        a = numeric_theta_star(config, n_oracle=200_000)
        b = numeric_theta_star(config, n_oracle=200_000)
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.mc_se, b.mc_se)


class TestRunStudy:
    def test_identity_plugin_collapse_gives_identical_records(self):
        config = SimConfig(setting="low1", n=60, n_test=50, seed=21)
        result = run_study(config, ["ols", "mod-ols:identity"], n_replicates=5)
        by_est = {
            est: [r for r in result.records if r.estimator == est]
            for est in result.estimators
        }
        for a, b in zip(by_est["ols"], by_est["mod-ols:identity"]):
            np.testing.assert_allclose(a.theta_hat, b.theta_hat, atol=1e-10)
        agg = result.aggregate()
        np.testing.assert_allclose(
            agg["ols"]["rmse_per_coord"],
            agg["mod-ols:identity"]["rmse_per_coord"],
            atol=1e-10,
        )

    def test_modular_cuts_sd_on_low1(self):
        config = SimConfig(setting="low1", n=200, n_test=50, seed=22)
        result = run_study(config, ["ols", "mod-ols:linear"], n_replicates=200)
        agg = result.aggregate()
        sd_ols = np.asarray(agg["ols"]["sd_per_coord"])
        sd_mod = np.asarray(agg["mod-ols:linear"]["sd_per_coord"])
        assert np.all(sd_mod <= sd_ols)

    def test_aggregation_identity(self):
        config = SimConfig(setting="low1", n=80, n_test=50, seed=23)
        result = run_study(config, ["ols"], n_replicates=20)
        agg = result.aggregate()["ols"]
        rmse2 = np.asarray(agg["rmse_per_coord"]) ** 2
        bias2 = np.asarray(agg["bias_per_coord"]) ** 2
        sd2 = np.asarray(agg["sd_per_coord"]) ** 2
        assert np.abs(rmse2 - bias2 - sd2).max() <= 1e-10

    def test_row_count_contract(self, tmp_path):
        config = SimConfig(setting="low1", n=40, n_test=20, seed=24)
        result = run_study(config, ["ols", "mod-ols:identity"], n_replicates=2)
        out = tmp_path / "results.csv"
        result.to_csv(str(out))
        rows = out.read_text().strip().splitlines()
        assert len(rows) == 1 + 4  # header + replicates x estimators

    def test_parallel_matches_serial_bytes(self, tmp_path):
        config = SimConfig(setting="low1", n=50, n_test=30, seed=25)
        ests = ["ols", "mod-ols:linear"]
        a = run_study(config, ests, n_replicates=4, parallelism=1)
        b = run_study(config, ests, n_replicates=4, parallelism=2)
        fa, fb = tmp_path / "a.csv", tmp_path / "b.csv"
        a.to_csv(str(fa))
        b.to_csv(str(fb))
        assert fa.read_bytes() == fb.read_bytes()

    def test_failures_recorded_and_study_continues(self):
        config = SimConfig(setting="low1", n=50, n_test=20, seed=26, rho=1.0)
        # identity plug-in is undefined with pair blocks: every replicate fails
        result = run_study(config, ["mod-ols:identity", "mod-ols:linear"], 3)
        agg = result.aggregate()
        assert agg["mod-ols:identity"]["failures"] == 3
        assert agg["mod-ols:linear"]["failures"] == 0

    def test_unknown_estimator_spec(self):
        config = SimConfig(setting="low1", n=40, n_test=20, seed=27)
        result = run_study(config, ["mod-ols:forest"], n_replicates=2)
        assert all(r.failed for r in result.records)

    def test_summary_json_contains_realized_b(self, tmp_path):
        import json

        config = SimConfig(setting="low1", n=40, n_test=20, seed=28)
        result = run_study(config, ["ols"], n_replicates=2)
        out = tmp_path / "summary.json"
        result.summary_json(str(out))
        payload = json.loads(out.read_text())
        assert np.asarray(payload["config"]["b"]).shape == (6, 4)
        assert "mean_runtime_ms" in payload["aggregate"]["ols"]
