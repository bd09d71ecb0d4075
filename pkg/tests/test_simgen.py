import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from repshift.data import RepeatedDataset
from repshift.density_ratio import CopulaParams
from repshift.simgen import (ScenarioConfig, f0_case1, f0_case2, gen_covariates, gen_dataset,
                             gen_responses, oracle_f0, random_effect)


class TestScenarioConfig:
    def test_regime_defaults(self):
        b = ScenarioConfig(case=1, regime="bounded").copula
        u = ScenarioConfig(case=2, regime="unbounded").copula
        assert (b.mu_p, b.var_p, b.mu_q, b.var_q, b.d) == (0.0, 0.4, 0.5, 0.3, 3)
        assert (u.mu_p, u.var_p, u.mu_q, u.var_q, u.d) == (0.0, 0.3, 1.0, 0.5, 10)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ScenarioConfig(case=3)
        with pytest.raises(ValueError):
            ScenarioConfig(regime="mild")
        with pytest.raises(ValueError):
            ScenarioConfig(m=0)
        with pytest.raises(ValueError):
            ScenarioConfig(case=1, copula=CopulaParams(0, 1, 0, 1, 10))


class TestCovariates:
    def test_uniform_marginals_under_standard_copula(self):
        cfg = ScenarioConfig(case=1, copula=CopulaParams(0.0, 1.0, 0.0, 1.0, 3), seed=11)
        x = gen_covariates("source", cfg, 1000, 100).x
        for l in range(3):
            assert stats.kstest(x[:, l], "uniform").statistic < 0.01

    def test_source_marginal_law(self):
        cfg = ScenarioConfig(case=1, regime="unbounded", seed=12)
        x = gen_covariates("source", cfg, 1000, 100).x
        z_law = stats.norm(0.0, math.sqrt(0.3))
        assert stats.kstest(x[:, 0], lambda u: z_law.cdf(stats.norm.ppf(u))).statistic < 0.01

    def test_target_mean_against_quadrature(self):
        cfg = ScenarioConfig(case=1, regime="bounded", seed=13)
        x = gen_covariates("target", cfg, 2000, 10).x
        z = stats.norm(0.5, math.sqrt(0.3))
        expected, _ = integrate.quad(lambda t: stats.norm.cdf(t) * z.pdf(t), -10, 10)
        se = x[:, 0].std(ddof=1) / math.sqrt(len(x))
        assert abs(x[:, 0].mean() - expected) <= 3 * se

    def test_in_open_unit_cube(self):
        x = gen_covariates("target", ScenarioConfig(case=2, regime="unbounded"), 50, 20).x
        assert x.shape == (1000, 10)
        assert np.all((x > 0) & (x < 1))

    def test_reproducible(self):
        cfg = ScenarioConfig(case=1, seed=5)
        a, b = gen_dataset("source", cfg, 20, 4), gen_dataset("source", cfg, 20, 4)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        c = gen_dataset("source", cfg.with_seed(6), 20, 4)
        assert not np.array_equal(a.x, c.x)

    def test_subject_streams_ignore_sample_size(self):
        cfg = ScenarioConfig(case=1, seed=7)
        small, large = gen_dataset("source", cfg, 5, 3), gen_dataset("source", cfg, 12, 3)
        np.testing.assert_array_equal(small.x, large.x[:15])
        np.testing.assert_array_equal(small.y, large.y[:15])

    def test_domains_and_streams_differ(self):
        cfg = ScenarioConfig(case=1, seed=8)
        src = gen_covariates("source", cfg, 3, 3).x
        assert not np.array_equal(src, gen_covariates("target", cfg, 3, 3).x)
        assert not np.array_equal(src, gen_covariates("source", cfg, 3, 3, stream="validation").x)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            gen_covariates("elsewhere", ScenarioConfig(), 2, 2)
        with pytest.raises(ValueError):
            gen_covariates("source", ScenarioConfig(), 0, 2)


class TestOracles:
    @pytest.mark.parametrize("x, expected", [
        ((0.0, 0.0, 0.0), 0.0),
        ((1.0, 1.0, 1.0), 0.0),
        ((0.25, 0.0, 0.0), math.sqrt(2) / 2),
    ])
    def test_case1_values(self, x, expected):
        assert f0_case1(np.array(x)) == pytest.approx(expected, abs=1e-12)
        assert oracle_f0(1)(np.array(x)) == pytest.approx(expected, abs=1e-12)

    def test_case2_values(self):
        assert f0_case2(np.zeros(10)) == 0.0
        x = np.zeros(10)
        x[:5] = 0.25
        assert f0_case2(x) == pytest.approx(1.0, abs=1e-15)
        assert f0_case2(np.full(10, 0.5)) == pytest.approx(0.0, abs=1e-15)

    def test_dimension_errors(self):
        with pytest.raises(ValueError):
            f0_case1(np.zeros(4))
        with pytest.raises(ValueError):
            f0_case2(np.zeros(3))
        with pytest.raises(ValueError):
            oracle_f0(7)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
    def test_case1_vectorised_matches_pointwise(self, row):
        x = np.array([row, row[::-1]])
        np.testing.assert_allclose(f0_case1(x), [f0_case1(x[0]), f0_case1(x[1])], rtol=0, atol=0)
        assert abs(f0_case1(x[0])) <= 1.0


class TestResponses:
    def test_noiseless_responses_equal_oracle(self):
        cfg = ScenarioConfig(case=2, lambda_sd=0.0, noise_sd=0.0, seed=1)
        ds = gen_dataset("source", cfg, 10, 5)
        np.testing.assert_array_equal(ds.y, f0_case2(ds.x))

    def test_noise_variance(self):
        cfg = ScenarioConfig(case=1, lambda_sd=0.0, seed=2)
        ds = gen_dataset("source", cfg, 1000, 100)
        assert np.var(ds.y - f0_case1(ds.x)) == pytest.approx(1e-4, rel=0.1)

    @pytest.mark.parametrize("case", [1, 2])
    def test_random_effect_has_zero_mean(self, case):
        cfg = ScenarioConfig(case=case, noise_sd=0.0, seed=3)
        d = cfg.d
        point = np.linspace(0.2, 0.8, d)
        cov = RepeatedDataset(np.tile(point, (10_000, 1)), np.arange(10_001))
        effect = gen_responses(cov, cfg).y - oracle_f0(case)(point)
        assert abs(effect.mean()) <= 3 * effect.std(ddof=1) / math.sqrt(len(effect))

    def test_within_subject_correlation(self):
        cfg = ScenarioConfig(case=1, noise_sd=0.01, seed=4)
        base = np.array([0.4, 0.5, 0.6])
        xs = [np.stack([base, base + 0.01]) for _ in range(1000)]
        cov = RepeatedDataset.from_subjects(xs)
        resid = (gen_responses(cov, cfg).y - f0_case1(cov.x)).reshape(1000, 2)
        within = np.corrcoef(resid[:, 0], resid[:, 1])[0, 1]
        across = np.corrcoef(resid[:-1, 0], resid[1:, 1])[0, 1]
        assert within > 0.5
        assert abs(across) <= 3 / math.sqrt(999)

    def test_dimension_mismatch(self):
        cov = gen_covariates("source", ScenarioConfig(case=1), 2, 2)
        with pytest.raises(ValueError):
            gen_responses(cov, ScenarioConfig(case=2))

    @staticmethod
    def _effect_sd(case, n_terms, n_subjects=20_000):
        d = 3 if case == 1 else 10
        blocks = 3 if case == 1 else 2
        rng = np.random.default_rng(9)
        out = {k: [] for k in n_terms}
        for _ in range(n_subjects):
            lam = 0.1 * rng.standard_normal((max(n_terms), blocks))
            x = rng.random((1, d))
            for k in n_terms:
                out[k].append(random_effect(case, x, lam[:k])[0])
        return {k: float(np.std(v)) for k, v in out.items()}

    @pytest.mark.parametrize("case", [1, 2])
    def test_default_truncation_captures_the_series(self, case):
        sd = self._effect_sd(case, (50, 100))
        assert sd[50] == pytest.approx(sd[100], rel=0.02)

    def test_truncation_sd_ratio_matches_closed_form(self):
        # E_x (sin + cos)^2 = 1 for integer frequencies on a uniform coordinate,
        # so Var f_i is proportional to the partial sum of 1/k^2 over k = 2..K+1
        def partial(K):
            return sum(1.0 / k ** 2 for k in range(2, K + 2))

        sd = self._effect_sd(1, (20, 100))
        assert sd[20] / sd[100] == pytest.approx(math.sqrt(partial(20) / partial(100)), rel=0.005)
        assert 1 - sd[20] / sd[100] > 0.02

    def test_series_matches_formula(self):
        lam = np.array([[0.3, -0.2, 0.1], [0.5, 0.0, -0.4]])
        x = np.array([[0.1, 0.7, 0.35]])
        expected = 0.0
        for k_idx, k in enumerate((2, 3)):
            for l in range(3):
                arg = k * math.pi * x[0, l]
                expected += math.sqrt(3) * lam[k_idx, l] * (math.sin(arg) + math.cos(arg)) / (math.sqrt(3) * k)
        assert random_effect(1, x, lam)[0] == pytest.approx(expected, rel=1e-13)
