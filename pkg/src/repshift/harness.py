"""Monte Carlo replications of the three estimators and the approximation benchmark.

Every replication derives its own seed from the master seed and its index, so
results do not depend on execution order or on the worker count.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .data import RepeatedDataset
from .dataio import write_table
from .density_ratio import RatioModel, percentile_clip_level, ratio_train_config
from .nn import TrainingDivergedError
from .regression import (ESTIMATORS, FittedRegression, fit_kre, fit_naive, fit_ure,
                         regression_train_config)
from .rng import derive_seed
from .simgen import ScenarioConfig, gen_dataset, oracle_f0
from .simplex import (HolderSpec, build_approximant, error_certificate, evaluate,
                      polynomial_oracle, ridge_sine_holder_constant, ridge_sine_oracle)

# Truncation level shared by the fitted-ratio network and the known ratio when
# the ratio is unbounded. An unclipped least-squares ratio fit chases the
# target-only corner of the cube and collapses to ~0 on the source bulk.
UNBOUNDED_XI = 5.0

RESULT_HEADER = ("method", "regime", "n_p", "m", "mse_mean", "mse_sd", "failures",
                 "per_replication_mse", "wall_time")
REPLICATION_HEADER = ("method", "replication", "seed", "mse", "status", "xi", "wall_time")


@dataclass(frozen=True)
class ExperimentConfig:
    """One Table-style experiment.

    ``xi`` is the truncation policy: ``"auto"`` (none for a bounded ratio,
    ``UNBOUNDED_XI`` otherwise), ``"none"``, ``"percentile"`` (95th percentile
    of the ratio over the source half, applied after fitting) or a positive
    number. ``response_bound`` truncates regression outputs to [-B, B].
    """

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    methods: tuple[str, ...] = ESTIMATORS
    replications: int = 10
    eval_n_q: int = 2000
    output_dir: str | None = None
    parallelism: int = 1
    xi: float | str = "auto"
    response_bound: float | None = 1.0
    max_epochs: int = 200
    master_seed: int = 0

    def __post_init__(self):
        methods = tuple(dict.fromkeys(m.upper() for m in self.methods))
        if not methods:
            raise ValueError("at least one method is required")
        bad = [m for m in methods if m not in ESTIMATORS]
        if bad:
            raise ValueError(f"unknown methods: {', '.join(bad)}")
        object.__setattr__(self, "methods", methods)
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.eval_n_q < 1:
            raise ValueError("eval_n_q must be positive")
        if self.parallelism < 1:
            raise ValueError("parallelism must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        if isinstance(self.xi, str):
            if self.xi not in ("auto", "none", "percentile"):
                raise ValueError(f"unknown xi policy {self.xi!r}")
        elif not self.xi > 0:
            raise ValueError("xi must be positive")
        if self.response_bound is not None and not self.response_bound > 0:
            raise ValueError("response_bound must be positive")

    @property
    def n_validation(self) -> int:
        return int(math.ceil(0.2 * self.scenario.n_p))

    def resolved_xi(self) -> float | str | None:
        if self.xi == "auto":
            return None if self.scenario.copula.is_bounded else UNBOUNDED_XI
        if self.xi == "none":
            return None
        return self.xi

    def describe(self) -> dict:
        out = asdict(self)
        out["scenario"]["copula"] = asdict(self.scenario.copula)
        out["resolved_xi"] = self.resolved_xi()
        out["n_validation"] = self.n_validation
        return out


@dataclass(frozen=True)
class ResultRow:
    method: str
    regime: str
    n_p: int
    m: int
    mse_mean: float
    mse_sd: float
    mses: tuple[float, ...]
    wall_time: float
    failures: int = 0

    @classmethod
    def from_mses(cls, method: str, regime: str, n_p: int, m: int, mses: Sequence[float],
                  wall_time: float, failures: int = 0) -> "ResultRow":
        vals = np.asarray([v for v in mses if np.isfinite(v)], dtype=float)
        mean = float(vals.mean()) if vals.size else math.nan
        sd = float(vals.std(ddof=1)) if vals.size > 1 else math.nan
        return cls(method, regime, n_p, m, mean, sd, tuple(float(v) for v in mses),
                   wall_time, failures)


@dataclass(frozen=True)
class ReplicationRecord:
    method: str
    replication: int
    seed: int
    mse: float
    status: str
    xi: float | None
    wall_time: float


def prediction_mse(model, target_cov, f0: Callable) -> float:
    """Mean of (f_hat(x) - f0(x))^2 over all target observations."""
    x = target_cov.x if isinstance(target_cov, RepeatedDataset) else np.atleast_2d(target_cov)
    if isinstance(model, FittedRegression):
        if model.net.input_dim != x.shape[1]:
            raise ValueError(f"model expects dimension {model.net.input_dim}, got {x.shape[1]}")
        pred = model.predict(x)
    else:
        pred = np.asarray(model(x), dtype=float)
    err = pred - np.asarray(f0(x), dtype=float)
    return float(np.mean(err * err))


def replication_seed(master: int, r: int) -> int:
    return derive_seed(master, "replication", r)


@dataclass(frozen=True)
class ReplicationData:
    source: RepeatedDataset
    validation: RepeatedDataset
    target: RepeatedDataset
    ratio_validation: RepeatedDataset
    evaluation: RepeatedDataset


def replication_data(cfg: ExperimentConfig, seed: int) -> ReplicationData:
    sc = cfg.scenario.with_seed(seed)
    n_v, m = cfg.n_validation, sc.m
    return ReplicationData(
        source=gen_dataset("source", sc, sc.n_p, m),
        validation=gen_dataset("source", sc, n_v, m, stream="validation"),
        target=gen_dataset("target", sc, sc.n_q, m, responses=False),
        ratio_validation=gen_dataset("source", sc, n_v, m, stream="ratio-validation",
                                     responses=False),
        evaluation=gen_dataset("target", sc, cfg.eval_n_q, m, stream="evaluation",
                               responses=False),
    )


def fit_method(method: str, cfg: ExperimentConfig, data: ReplicationData,
               seed: int) -> FittedRegression:
    # one initialisation and shuffling stream for every method keeps the
    # comparison paired within a replication
    reg_cfg = regression_train_config(derive_seed(seed, "regression"), max_epochs=cfg.max_epochs)
    xi = cfg.resolved_xi()
    bound = cfg.response_bound
    if method == "NE":
        return fit_naive(data.source, reg_cfg, data.validation, bound=bound)
    if method == "KRE":
        ratio = RatioModel.exact(cfg.scenario.copula)
        if xi == "percentile":
            ratio = ratio.clipped(percentile_clip_level(ratio, data.source))
        elif xi is not None:
            ratio = ratio.clipped(xi)
        return fit_kre(data.source, ratio, reg_cfg, data.validation, bound=bound)
    ratio_cfg = ratio_train_config(derive_seed(seed, "ratio"),
                                   max_epochs=cfg.max_epochs)
    return fit_ure(data.source, data.target, reg_cfg, ratio_cfg, data.validation,
                   data.ratio_validation, clip=xi, split_seed=derive_seed(seed, "split"),
                   bound=bound)


def run_replication(cfg: ExperimentConfig, r: int) -> list[ReplicationRecord]:
    seed = replication_seed(cfg.master_seed, r)
    data = replication_data(cfg, seed)
    f0 = oracle_f0(cfg.scenario.case)
    records = []
    for method in cfg.methods:
        start = time.perf_counter()
        xi = None
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                model = fit_method(method, cfg, data, seed)
            mse = prediction_mse(model, data.evaluation, f0)
            status = "ok" if np.isfinite(mse) else "nonfinite"
            if model.ratio_used is not None:
                xi = model.ratio_used.clip_level
        except TrainingDivergedError as exc:
            mse, status = math.nan, f"diverged@{exc.epoch}"
        except (ValueError, ArithmeticError) as exc:
            mse, status = math.nan, f"error:{type(exc).__name__}"
        records.append(ReplicationRecord(method, r, seed, mse, status, xi,
                                         time.perf_counter() - start))
    return records


def _run_one(args):
    return run_replication(*args)


def aggregate(cfg: ExperimentConfig, records: Sequence[ReplicationRecord]) -> list[ResultRow]:
    rows = []
    sc = cfg.scenario
    for method in cfg.methods:
        mine = sorted((rec for rec in records if rec.method == method), key=lambda r: r.replication)
        rows.append(ResultRow.from_mses(
            method, sc.regime, sc.n_p, sc.m, [rec.mse for rec in mine],
            sum(rec.wall_time for rec in mine), sum(rec.status != "ok" for rec in mine)))
    return rows


def manifest(cfg: ExperimentConfig) -> dict:
    return {
        "library": "repshift",
        "version": __version__,
        "config": cfg.describe(),
        "replication_seeds": [replication_seed(cfg.master_seed, r)
                              for r in range(cfg.replications)],
        "series_terms": cfg.scenario.series_terms,
        "xi_policy": cfg.xi,
        "response_bound": cfg.response_bound,
    }


def write_results(cfg: ExperimentConfig, rows: Sequence[ResultRow],
                  records: Sequence[ReplicationRecord], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    meta = manifest(cfg)
    summary = out_dir / "results.csv"
    write_table(summary, RESULT_HEADER,
                ([r.method, r.regime, r.n_p, r.m, r.mse_mean, r.mse_sd, r.failures,
                  ";".join(f"{v:.17g}" for v in r.mses), r.wall_time] for r in rows), meta)
    detail = out_dir / "replications.csv"
    write_table(detail, REPLICATION_HEADER,
                ([rec.method, rec.replication, rec.seed, rec.mse, rec.status,
                  "none" if rec.xi is None else float(rec.xi), rec.wall_time]
                 for rec in records), meta)
    return summary, detail


def run_experiment(cfg: ExperimentConfig, progress: Callable[[str], None] | None = None
                   ) -> tuple[list[ResultRow], list[ReplicationRecord]]:
    """Run all replications, aggregate per method and write CSVs when an output dir is set."""
    jobs = [(cfg, r) for r in range(cfg.replications)]
    records: list[ReplicationRecord] = []
    if cfg.parallelism > 1 and cfg.replications > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.parallelism, cfg.replications)) as pool:
            for batch in pool.map(_run_one, jobs):
                records.extend(batch)
                if progress:
                    progress(_progress_line(batch))
    else:
        for job in jobs:
            batch = _run_one(job)
            records.extend(batch)
            if progress:
                progress(_progress_line(batch))
    records.sort(key=lambda rec: (rec.replication, cfg.methods.index(rec.method)))
    rows = aggregate(cfg, records)
    if cfg.output_dir is not None:
        write_results(cfg, rows, records, cfg.output_dir)
    return rows, records


def _progress_line(batch: Sequence[ReplicationRecord]) -> str:
    parts = [f"{rec.method}={rec.mse:.5g}" if rec.status == "ok" else f"{rec.method}={rec.status}"
             for rec in batch]
    return f"replication {batch[0].replication}: " + " ".join(parts)


def format_table(rows: Sequence[ResultRow], scale: float = 10.0) -> str:
    """Human-readable summary; values multiplied by ``scale`` for display only."""
    lines = [f"{'method':6s} {'regime':9s} {'n_p':>5s} {'m':>3s} {'mean':>9s} {'sd':>9s} fail"]
    for r in rows:
        lines.append(f"{r.method:6s} {r.regime:9s} {r.n_p:5d} {r.m:3d} "
                     f"{r.mse_mean * scale:9.4f} {r.mse_sd * scale:9.4f} {r.failures:4d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# approximation benchmark


@dataclass(frozen=True)
class BenchmarkFunction:
    """A test function with exact derivatives and a valid Hoelder constant."""

    name: str
    d: int
    oracle: Callable
    value: Callable
    holder_constant: Callable[[int], float]
    max_t: int | None = None  # highest Taylor order with derivatives, None if unlimited


def ridge_sine(w: Sequence[float], phase: float = 0.0, name: str | None = None) -> BenchmarkFunction:
    w = tuple(float(v) for v in w)
    oracle = ridge_sine_oracle(w, phase)
    return BenchmarkFunction(name or f"sin({','.join(f'{v:g}' for v in w)})", len(w), oracle,
                             lambda x: oracle((0,) * len(w), x),
                             lambda t: ridge_sine_holder_constant(w, t))


def abs_sine(w: Sequence[float], shift: float, name: str | None = None) -> BenchmarkFunction:
    """|sin(w . x - shift)|: Lipschitz with a kink, so only t = 0 is available."""
    w = np.asarray(w, dtype=float)
    d = w.shape[0]

    def value(x):
        return np.abs(np.sin(np.atleast_2d(x) @ w - shift))

    def oracle(alpha, x):
        if any(alpha):
            raise ValueError("|sin| has no derivatives at its kinks")
        return value(x)

    def holder_constant(t: int) -> float:
        if t != 0:
            raise ValueError("|sin| is only Lipschitz")
        return max(1.0, float(np.abs(w).sum()))

    label = name or f"|sin({','.join(f'{v:g}' for v in w)} - {shift:g})|"
    return BenchmarkFunction(label, d, oracle, value, holder_constant, max_t=0)


def polynomial(coeffs: dict[tuple[int, ...], float], name: str) -> BenchmarkFunction:
    d = len(next(iter(coeffs)))
    oracle = polynomial_oracle(coeffs)
    return BenchmarkFunction(name, d, oracle, lambda x: oracle((0,) * d, x), lambda t: 1.0)


DEFAULT_BENCHMARK = (
    ridge_sine([np.pi], name="sin(pi x)"),
    ridge_sine([np.pi, np.pi], name="sin(pi(x1+x2))"),
    ridge_sine([1.0, 2.0, 1.5], phase=0.3, name="sin(x1+2x2+1.5x3+0.3)"),
    abs_sine([np.pi], np.pi / 3, name="|sin(pi x - pi/3)|"),
    abs_sine([np.pi, np.pi], np.pi / 3, name="|sin(pi(x1+x2) - pi/3)|"),
)


@dataclass(frozen=True)
class BenchmarkRow:
    function: str
    d: int
    zeta: float
    t: int
    B: float
    N: int
    sup_error: float
    certificate: float


def approx_benchmark(zetas: Sequence[float] = (1.0, 2.0), Ns: Sequence[int] = (4, 8, 16, 32),
                     functions: Sequence[BenchmarkFunction] = DEFAULT_BENCHMARK,
                     n_points: int = 10_000, seed: int = 0, out_path=None) -> list[BenchmarkRow]:
    """Sup error over random points against the certificate for every (function, zeta, N).

    Smoothness levels beyond a function's available derivatives are skipped.
    """
    rows = []
    for fn in functions:
        pts = np.random.default_rng(derive_seed(seed, "bench", fn.name)).random((n_points, fn.d))
        truth = np.asarray(fn.value(pts), dtype=float)
        for zeta in zetas:
            t = int(math.ceil(zeta)) - 1
            if fn.max_t is not None and t > fn.max_t:
                continue
            spec = HolderSpec(zeta, fn.holder_constant(t), t)
            for N in Ns:
                approx = build_approximant(fn.oracle, spec, N, fn.d)
                err = float(np.max(np.abs(evaluate(approx, pts) - truth)))
                rows.append(BenchmarkRow(fn.name, fn.d, zeta, t, spec.B, N, err,
                                         error_certificate(spec, fn.d, N)))
    if out_path is not None:
        write_table(out_path, ("function", "d", "zeta", "t", "B", "N", "sup_error", "certificate"),
                    ([r.function, r.d, float(r.zeta), r.t, float(r.B), r.N, r.sup_error,
                      r.certificate] for r in rows),
                    {"library": "repshift", "version": __version__, "n_points": n_points,
                     "seed": seed})
    return rows


def log_log_slope(Ns: Sequence[int], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(N)."""
    return float(np.polyfit(np.log(np.asarray(Ns, dtype=float)),
                            np.log(np.asarray(errors, dtype=float)), 1)[0])

