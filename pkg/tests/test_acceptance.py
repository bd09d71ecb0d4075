"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line with the measured quantities. The two
Monte Carlo experiments (criteria 6 and 7) take several minutes each.
"""
import functools
import itertools
import math
import os
import time

import numpy as np
import pytest
from scipy import integrate, stats

from repshift.cli import main
from repshift.dataio import binned_mse
from repshift.density_ratio import CopulaParams, RatioModel, fit_ratio, ratio_train_config
from repshift.harness import ExperimentConfig, abs_sine, log_log_slope, ridge_sine, run_experiment
from repshift.nn import (LsifLoss, MlpNetwork, OutputActivation, RatioData, RegressionData,
                         SquaredLoss, gradient, loss_value)
from repshift.simgen import ScenarioConfig
from repshift.simplex import (HolderSpec, build_approximant, error_certificate, evaluate,
                              multi_indices, polynomial_oracle, pou_matrix)

CORES = os.cpu_count() or 1


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail}")
        assert ok, detail
    return report


def copula_sample(mu, var, n, d, rng):
    return stats.norm.cdf(mu + math.sqrt(var) * rng.standard_normal((n, d)))


# 1 -------------------------------------------------------------------------


def _numeric_grad(net, loss, data, h=1e-5):
    out = []
    for arrays in zip(net.weights, net.biases):
        pair = []
        for arr in arrays:
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = loss_value(net, loss, data)
                arr[idx] = old - h
                down = loss_value(net, loss, data)
                arr[idx] = old
                g[idx] = (up - down) / (2 * h)
            pair.append(g)
        out.append(pair)
    return out


def test_gradient_fidelity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, checked, bad, pairs = 0.0, 0, 0, 0
    for _ in range(20):
        d = int(rng.integers(1, 4))
        dims = [d, *rng.integers(2, 7, size=rng.integers(1, 3)), 1]
        ws = tuple(rng.normal(0, 1, (dims[i + 1], dims[i])) for i in range(len(dims) - 1))
        bs = tuple(rng.normal(0, 0.5, dims[i + 1]) for i in range(len(dims) - 1))
        x, y = rng.random((10, d)), rng.normal(size=10)
        cases = [
            (MlpNetwork(ws, bs), SquaredLoss(), RegressionData(x, y)),
            (MlpNetwork(ws, bs), SquaredLoss(), RegressionData(x, y, rng.random(10) * 5)),
            (MlpNetwork(ws, bs, OutputActivation(softplus=True)), LsifLoss(),
             RatioData(x, rng.random((7, d)))),
        ]
        for net, loss, data in cases:
            pairs += 1
            _, analytic = gradient(net, loss, data)
            numeric = _numeric_grad(net, loss, data)
            for a, n in zip(itertools.chain(*analytic), itertools.chain(*numeric)):
                excess = np.abs(a - n) - (1e-7 + 1e-4 * np.abs(n))
                worst = max(worst, float(excess.max()))
                bad += int(np.sum(excess > 0))
                checked += a.size
    elapsed = time.perf_counter() - start
    verdict(1, "gradient fidelity", bad == 0 and elapsed < 10,
            f"{checked} partials over {pairs} net/loss pairs, {bad} outside 1e-4 rel / 1e-7 abs "
            f"(worst excess {worst:.1e}), {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------


def test_polynomial_exactness(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for d, N, zeta in itertools.product((1, 2, 3), (1, 2, 8), (1.0, 2.0, 3.0)):
        t = math.ceil(zeta) - 1
        coeffs = {k: float(rng.normal()) for k in multi_indices(d, t)}
        oracle = polynomial_oracle(coeffs)
        x = np.vstack([rng.random((2000, d)), np.eye(d), np.zeros((1, d)), np.ones((1, d))])
        approx = build_approximant(oracle, HolderSpec(zeta, 1.0), N, d)
        worst = max(worst, float(np.max(np.abs(evaluate(approx, x) - oracle((0,) * d, x)))))
    elapsed = time.perf_counter() - start
    verdict(2, "polynomial exactness", worst <= 1e-10 and elapsed < 5,
            f"max sup error {worst:.1e} over d in 1..3, N in (1, 2, 8), degree <= t in 0..2, "
            f"{elapsed:.1f}s")


# 3 -------------------------------------------------------------------------


CERTIFICATE_CASES = [
    (ridge_sine([np.pi], name="sin(pi x)"), 2.0),
    (ridge_sine([np.pi], np.pi / 2, name="cos(pi x)"), 3.0),
    (ridge_sine([np.pi, np.pi / 2], name="sin(pi x1 + pi x2 / 2)"), 2.0),
    (ridge_sine([np.pi, np.pi / 2], np.pi / 2, name="cos(pi x1 + pi x2 / 2)"), 3.0),
    (ridge_sine([1.0, 2.0, 1.5], 0.3, name="sin(x1 + 2 x2 + 1.5 x3 + 0.3)"), 2.0),
    (ridge_sine([1.0, 2.0, 1.5], np.pi / 2, name="cos(x1 + 2 x2 + 1.5 x3)"), 3.0),
    (abs_sine([np.pi], np.pi / 3, name="|sin(pi x - pi/3)|"), 1.0),
    (abs_sine([np.pi, np.pi], np.pi / 3, name="|sin(pi(x1 + x2) - pi/3)|"), 1.0),
    (abs_sine([np.pi / 2] * 3, np.pi / 3, name="|sin(pi(x1 + x2 + x3)/2 - pi/3)|"), 1.0),
]


def test_certificate_and_rate(verdict):
    start = time.perf_counter()
    Ns = (4, 8, 16, 32)
    lines, ok = [], True
    for fn, zeta in CERTIFICATE_CASES:
        t = math.ceil(zeta) - 1
        spec = HolderSpec(zeta, fn.holder_constant(t))
        x = np.random.default_rng(3).random((10_000, fn.d))
        truth = fn.value(x)
        errs, within = [], True
        for N in Ns:
            err = float(np.max(np.abs(evaluate(build_approximant(fn.oracle, spec, N, fn.d), x) - truth)))
            within &= err <= error_certificate(spec, fn.d, N)
            errs.append(err)
        slope = log_log_slope(Ns, errs)
        good = within and abs(slope + zeta) <= 0.25
        ok &= good
        lines.append(f"{fn.name} zeta={zeta:g} slope={slope:.2f}{'' if good else ' (X)'}")
    elapsed = time.perf_counter() - start
    verdict(3, "simplicial certificate and rate", ok and elapsed < 30,
            "; ".join(lines) + f"; {elapsed:.1f}s")


# 4 -------------------------------------------------------------------------


def test_partition_of_unity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst_sum, most_active = 0.0, 0
    ok = True
    for d in (1, 2, 3):
        x = rng.random((10_000, d))
        for N in (1, 2, 8):
            psi = pou_matrix(x, N)
            worst_sum = max(worst_sum, float(np.max(np.abs(psi.sum(axis=1) - 1.0))))
            active = int(np.max(np.count_nonzero(psi, axis=1)))
            most_active = max(most_active, active)
            ok &= active <= d + 1 and bool(np.all(psi >= 0))
    elapsed = time.perf_counter() - start
    ok &= worst_sum <= 1e-12 and elapsed < 5
    verdict(4, "partition of unity", ok,
            f"max |sum - 1| = {worst_sum:.1e}, at most {most_active} active weights "
            f"(d+1 bound respected per d), {elapsed:.1f}s")


# 5 -------------------------------------------------------------------------


def test_density_ratio_sanity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    mu, var = 0.0, 0.4
    src, tgt, held = (copula_sample(mu, var, 2000, 2, rng) for _ in range(3))
    mean = float(np.mean(fit_ratio(src, tgt, ratio_train_config(seed=0)).evaluate(held)))

    # L(r) = E_P[r^2]/2 - E_Q[r] at the exact bounded ratio should equal -E_Q[r]/2, where
    # E_Q[r] = E_P[r^2] factorises into one-dimensional integrals of q^2 / p
    p = CopulaParams(mu_p=0.0, var_p=0.4, mu_q=0.5, var_q=0.3, d=3)
    sq, sp = math.sqrt(p.var_q), math.sqrt(p.var_p)
    one_d, _ = integrate.quad(lambda z: math.exp(2 * stats.norm.logpdf(z, p.mu_q, sq)
                                                 - stats.norm.logpdf(z, p.mu_p, sp)), -30, 30)
    target = -0.5 * one_d ** p.d
    n = 200_000
    r = RatioModel.exact(p)
    rp = r.evaluate(copula_sample(p.mu_p, p.var_p, n, p.d, rng))
    rq = r.evaluate(copula_sample(p.mu_q, p.var_q, n, p.d, rng))
    risk = 0.5 * np.mean(rp ** 2) - np.mean(rq)
    se = math.sqrt(0.25 * np.var(rp ** 2) / n + np.var(rq) / n)
    elapsed = time.perf_counter() - start
    ok = 0.8 <= mean <= 1.2 and abs(risk - target) <= 3 * se and elapsed < 120
    verdict(5, "density-ratio sanity", ok,
            f"P=Q fitted mean {mean:.3f}; L(r) {risk:.4f} vs -E_Q[r]/2 {target:.4f} "
            f"({abs(risk - target) / se:.2f} SE); {elapsed:.1f}s")


# 6, 7 ----------------------------------------------------------------------


@functools.cache
def _experiment(regime, m):
    cfg = ExperimentConfig(ScenarioConfig(case=1, regime=regime, n_p=500, m=m),
                           replications=10, parallelism=CORES)
    start = time.perf_counter()
    rows, _ = run_experiment(cfg)
    return {r.method: r for r in rows}, time.perf_counter() - start


def _summary(rows, reference):
    parts = []
    for method, row in rows.items():
        factor = row.mse_mean / reference[method]
        parts.append(f"{method} {row.mse_mean:.4f} ({row.mse_sd:.4f}), "
                     f"x{factor:.2f} of reference, failures {row.failures}")
    return "; ".join(parts)


def test_unbounded_ordering(verdict):
    rows, elapsed = _experiment("unbounded", 25)
    ne, kre, ure = (rows[k].mse_mean for k in ("NE", "KRE", "URE"))
    ok = kre < ne and ure < ne and elapsed < 1800
    reference = {"NE": 0.0280, "KRE": 0.0065, "URE": 0.0076}
    verdict(6, "unbounded ordering KRE, URE < NE", ok,
            f"{_summary(rows, reference)}; {elapsed / 60:.1f} min on {CORES} core(s)")


def test_unbounded_ordering_per_replication():
    # URE should win in most paired replications, not only on average
    rows, _ = _experiment("unbounded", 25)
    wins = sum(u < n for u, n in zip(rows["URE"].mses, rows["NE"].mses))
    print(f"\nURE below NE in {wins} of {len(rows['NE'].mses)} replications")
    assert wins >= 7


def test_bounded_no_harm(verdict):
    rows, elapsed = _experiment("bounded", 50)
    ok = rows["KRE"].mse_mean <= rows["NE"].mse_mean and elapsed < 1800
    reference = {"NE": 0.0031, "KRE": 0.0020, "URE": float("nan")}
    verdict(7, "bounded no-harm KRE <= NE", ok,
            f"{_summary(rows, reference)}; {elapsed / 60:.1f} min on {CORES} core(s)")


# 8 -------------------------------------------------------------------------


def test_truncation_contract(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    p = CopulaParams(mu_p=0.0, var_p=0.3, mu_q=1.0, var_q=0.5, d=3)
    src = copula_sample(p.mu_p, p.var_p, 400, 3, rng)
    tgt = copula_sample(p.mu_q, p.var_q, 400, 3, rng)
    models = [fit_ratio(src, tgt, ratio_train_config(seed=0, max_epochs=10), clip=5.0)]
    models += [RatioModel.exact(p, xi) for xi in (0.5, 5.0, 50.0)]
    for xi in (0.1, 1.0, 5.0):
        net = MlpNetwork.init_he([3, 16, 16, 1], rng, OutputActivation(softplus=True))
        net.biases[-1][:] = 10.0  # push raw outputs well above the level
        models.append(RatioModel.fitted(net, xi))
    corners = np.array(list(itertools.product((0.0, 1.0), repeat=3)))
    x = np.vstack([rng.random((100_000, 3)), corners])
    violations = sum(int(np.sum(m.evaluate(x) > m.clip_level)) for m in models)
    elapsed = time.perf_counter() - start
    verdict(8, "truncation contract", violations == 0 and elapsed < 5,
            f"{len(models)} clipped models, {violations} values above their level "
            f"at {len(x)} points, {elapsed:.1f}s")


# 9 -------------------------------------------------------------------------


def _strip_wall_time(text):
    out = []
    col = None
    for line in text.splitlines():
        if line.startswith("#"):
            out.append(line)
            continue
        cells = line.split(",")
        if col is None:
            col = cells.index("wall_time")
        out.append(",".join(cells[:col] + cells[col + 1:]))
    return "\n".join(out)


def test_determinism(tmp_path, verdict):
    start = time.perf_counter()
    conf = tmp_path / "conf.txt"
    conf.write_text("regime = unbounded\nn_p = 30\nm = 5\nreplications = 2\n"
                    "eval_n_q = 200\nmax_epochs = 20\n")
    out = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        assert main(["--config", str(conf), "--seed", "17", "--out", str(out), "experiment"]) == 0
        snapshots.append({name: (out / name).read_text()
                          for name in ("results.csv", "replications.csv")})
    same = all(_strip_wall_time(snapshots[0][k]) == _strip_wall_time(snapshots[1][k])
               for k in snapshots[0])
    elapsed = time.perf_counter() - start
    verdict(9, "determinism", same and elapsed < 300,
            f"results.csv and replications.csv {'identical' if same else 'differ'} "
            f"apart from wall_time, {elapsed:.1f}s")


# 10 ------------------------------------------------------------------------


def test_binned_mse(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(10)
    worst, spread = 0.0, 0
    for n, c in ((1000, 0.3), (997, -2.5), (10, 1e-3), (12345, 7.0)):
        true = rng.normal(size=n)
        bins = binned_mse(true, true + c)
        worst = max(worst, max(abs(b.mse - c * c) for b in bins))
        counts = [b.count for b in bins]
        spread = max(spread, max(counts) - min(counts))
        assert len(bins) == 10
    elapsed = time.perf_counter() - start
    verdict(10, "binned MSE", worst <= 1e-12 and spread <= 1 and elapsed < 1,
            f"max |mse - c^2| = {worst:.1e}, max count spread {spread}, {elapsed:.2f}s")
