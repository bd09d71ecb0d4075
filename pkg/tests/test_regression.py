import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repshift.data import RepeatedDataset
from repshift.density_ratio import CopulaParams, RatioModel, ratio_train_config
from repshift.nn import MlpNetwork, OutputActivation
from repshift.regression import (FittedRegression, InvalidSplitError, fit_kre, fit_naive, fit_ure,
                                 load_fitted, regression_train_config, save_fitted, split_source,
                                 truncate_output, weighted_erm_loss)
from repshift.harness import ExperimentConfig, run_experiment
from repshift.simgen import ScenarioConfig, gen_dataset

SMALL = (16, 16)


def toy_dataset(n_subjects, m, seed=0, y=True):
    rng = np.random.default_rng(seed)
    x = rng.random((n_subjects * m, 2))
    resp = np.sin(3 * x[:, 0]) + x[:, 1] if y else None
    return RepeatedDataset(x, np.arange(0, n_subjects * m + 1, m), resp)


class TestSplit:
    def test_even_split(self):
        a, b = split_source(toy_dataset(10, 3), 0.5, seed=1)
        assert a.n_subjects == b.n_subjects == 5
        assert set(a.labels).isdisjoint(b.labels)

    def test_floor_rule(self):
        a, b = split_source(toy_dataset(3, 2), 0.5, seed=0)
        assert (a.n_subjects, b.n_subjects) == (1, 2)

    def test_deterministic(self):
        ds = toy_dataset(12, 2)
        assert split_source(ds, 0.5, 4)[0].labels == split_source(ds, 0.5, 4)[0].labels

    def test_empty_part(self):
        with pytest.raises(InvalidSplitError):
            split_source(toy_dataset(3, 2), 0.2)
        with pytest.raises(InvalidSplitError):
            split_source(toy_dataset(1, 2), 0.5)
        with pytest.raises(InvalidSplitError):
            split_source(toy_dataset(4, 2), 1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 60), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
    def test_partition_soundness(self, n, fraction, seed):
        ds = toy_dataset(n, 2)
        k = math.floor(fraction * n)
        if k in (0, n):
            with pytest.raises(InvalidSplitError):
                split_source(ds, fraction, seed)
            return
        a, b = split_source(ds, fraction, seed)
        assert a.n_subjects == k
        assert set(a.labels).isdisjoint(b.labels)
        assert sorted(a.labels + b.labels) == list(range(n))
        # subjects move whole: row blocks are preserved
        for part in (a, b):
            for label, (x, _) in zip(part.labels, part):
                np.testing.assert_array_equal(x, ds.subject(label)[0])


class TestWeightedLoss:
    def test_arithmetic(self):
        ds = RepeatedDataset(np.array([[0.1], [0.9]]), np.array([0, 1, 2]), np.array([1.0, 7.0]))
        ratio = RatioModel.fitted(_step_net())
        assert weighted_erm_loss(lambda x: np.zeros(len(x)), ds, ratio) == pytest.approx(1.0)

    def test_unit_ratio_is_mean_squared_error(self):
        ds = toy_dataset(5, 4)
        f = lambda x: x[:, 0]
        assert weighted_erm_loss(f, ds, RatioModel.const(1.0)) == pytest.approx(np.mean((ds.y - ds.x[:, 0]) ** 2))

    def test_missing_responses(self):
        with pytest.raises(ValueError):
            weighted_erm_loss(lambda x: x[:, 0], toy_dataset(2, 2, y=False), RatioModel.const(1.0))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
    def test_constant_ratio_scales_the_objective(self, c, seed):
        ds = toy_dataset(4, 3, seed=seed % 1000)
        rng = np.random.default_rng(seed)
        coef = rng.normal(size=2)
        f = lambda x: x @ coef
        base = weighted_erm_loss(f, ds, RatioModel.const(1.0))
        assert weighted_erm_loss(f, ds, RatioModel.const(c)) == pytest.approx(c * base, rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_interpolant_has_zero_loss(self, seed):
        ds = toy_dataset(3, 3, seed=seed % 1000)
        lookup = {tuple(r): v for r, v in zip(ds.x, ds.y)}
        f = lambda x: np.array([lookup[tuple(r)] for r in x])
        ratio = RatioModel.exact(CopulaParams(0.0, 0.3, 1.0, 0.5, 2))
        assert weighted_erm_loss(f, ds, ratio) == 0.0


def _step_net():
    """ReLU net equal to 2 at x = 0.1 and 0 at x = 0.9: (2 / 1.75) relu(2 - 2.5 x)."""
    return MlpNetwork((np.array([[-2.5]]), np.array([[2.0 / 1.75]])),
                      (np.array([2.0]), np.array([0.0])))


class TestTruncation:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
    def test_outputs_bounded(self, seed, bound):
        rng = np.random.default_rng(seed)
        net = MlpNetwork.init_he([2, 8, 1], rng)
        x = 10 * rng.normal(size=(100, 2))
        raw, cut = net(x), truncate_output(net, bound)(x)
        assert np.all(np.abs(cut) <= bound)
        np.testing.assert_array_equal(cut, np.clip(raw, -bound, bound))

    def test_never_moves_away_from_bounded_target(self):
        rng = np.random.default_rng(1)
        net = MlpNetwork.init_he([2, 8, 1], rng)
        x = 3 * rng.normal(size=(500, 2))
        truth = np.sin(x.sum(axis=1))
        cut = truncate_output(net, 1.0)(x)
        assert np.all(np.abs(cut - truth) <= np.abs(net(x) - truth))

    def test_none_and_invalid(self):
        net = MlpNetwork.init_he([1, 2, 1], np.random.default_rng(0))
        assert truncate_output(net, None) is net
        with pytest.raises(ValueError):
            truncate_output(net, 0.0)


def quick_cfg(seed=0, epochs=40):
    return regression_train_config(seed, max_epochs=epochs)


class TestEstimators:
    def test_naive_learns_constant(self):
        ds = toy_dataset(100, 10)
        ds = ds.with_responses(np.full(ds.n_obs, 0.7))
        model = fit_naive(ds, regression_train_config(0))
        grid = np.random.default_rng(3).random((500, 2))
        assert np.max(np.abs(model.predict(grid) - 0.7)) < 1e-2

    def test_unit_ratio_kre_equals_naive(self):
        ds, val = toy_dataset(20, 5, seed=1), toy_dataset(5, 5, seed=2)
        ne = fit_naive(ds, quick_cfg(3), val, hidden=SMALL)
        kre = fit_kre(ds, RatioModel.const(1.0), quick_cfg(3), val, hidden=SMALL)
        for a, b in zip(ne.net.weights, kre.net.weights):
            np.testing.assert_array_equal(a, b)
        x = np.random.default_rng(0).random((50, 2))
        np.testing.assert_array_equal(ne.predict(x), kre.predict(x))

    def test_kre_weights_respect_clip(self):
        cfg = ScenarioConfig(case=1, regime="unbounded", seed=3)
        src = gen_dataset("source", cfg, 30, 5)
        ratio = RatioModel.exact(cfg.copula, clip_level=5.0)
        assert np.max(ratio.evaluate(src.x)) <= 5.0
        model = fit_kre(src, ratio, quick_cfg(epochs=5), hidden=SMALL, bound=1.0)
        assert model.info["xi"] == 5.0
        assert np.all(np.abs(model.predict(np.random.default_rng(0).random((200, 3)))) <= 1.0)

    def test_vanishing_weights_rejected(self):
        with pytest.raises(ValueError):
            fit_kre(toy_dataset(4, 2), RatioModel.const(0.0), quick_cfg(epochs=2), hidden=SMALL)

    def test_ure_with_two_subjects(self):
        src = toy_dataset(2, 6, seed=4)
        tgt = toy_dataset(3, 6, seed=5, y=False)
        model = fit_ure(src, tgt, quick_cfg(epochs=3), ratio_train_config(0, max_epochs=3),
                        hidden=SMALL)
        assert model.split_record.n1 == 1
        assert len(model.split_record.first) == len(model.split_record.second) == 1
        assert model.ratio_used is not None and not model.ratio_used.is_known

    def test_ure_percentile_policy(self):
        src = toy_dataset(10, 5, seed=6)
        tgt = toy_dataset(10, 5, seed=7, y=False)
        model = fit_ure(src, tgt, quick_cfg(epochs=2), ratio_train_config(0, max_epochs=2),
                        clip="percentile", hidden=SMALL)
        assert model.info["clip_policy"] == "percentile"
        assert model.ratio_used.clip_level > 0
        with pytest.raises(ValueError):
            fit_ure(src, tgt, quick_cfg(epochs=2), ratio_train_config(0, max_epochs=2),
                    clip="median", hidden=SMALL)

    def test_ure_matches_naive_without_shift(self):
        # P = Q: the ratio is 1, so URE pays only for its half sample and the
        # ratio noise; over replications at the simulation scale its mean MSE
        # stays within twice NE's
        sc = ScenarioConfig(case=1, copula=CopulaParams(0.0, 0.4, 0.0, 0.4, 3), n_p=500, n_q=500, m=25)
        cfg = ExperimentConfig(sc, methods=("NE", "URE"), replications=4, eval_n_q=200)
        rows = {r.method: r for r in run_experiment(cfg)[0]}
        assert rows["URE"].failures == 0
        assert rows["URE"].mse_mean <= 2 * rows["NE"].mse_mean

    def test_estimator_contracts(self):
        net = MlpNetwork.init_he([2, 2, 1], np.random.default_rng(0))
        with pytest.raises(ValueError):
            FittedRegression(net, "NE", RatioModel.const(1.0))
        with pytest.raises(ValueError):
            FittedRegression(net, "KRE", RatioModel.fitted(net))
        with pytest.raises(ValueError):
            FittedRegression(net, "XYZ")


class TestPersistence:
    def test_round_trip(self, tmp_path):
        src = toy_dataset(6, 4, seed=9)
        tgt = toy_dataset(6, 4, seed=10, y=False)
        model = fit_ure(src, tgt, quick_cfg(epochs=2), ratio_train_config(0, max_epochs=2),
                        split_seed=77, hidden=SMALL, bound=1.0, clip=3.0)
        path = tmp_path / "model.txt"
        save_fitted(model, path)
        back = load_fitted(path)
        assert back.estimator_kind == "URE"
        assert back.split_record == model.split_record and back.split_record.seed == 77
        x = np.random.default_rng(0).random((40, 2))
        np.testing.assert_array_equal(back.predict(x), model.predict(x))
        np.testing.assert_array_equal(back.ratio_used.evaluate(x), model.ratio_used.evaluate(x))
        assert back.info["bound"] == 1.0
