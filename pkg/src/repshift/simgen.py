"""Simulation designs with Gaussian-copula covariate shift and subject-level
random-effect functions.

Every subject draws from its own generator, keyed by (seed, stream, subject),
so datasets do not depend on generation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import RepeatedDataset
from .density_ratio import CopulaParams
from .normal import norm_cdf
from .rng import make_rng

CASE_DIMS = {1: 3, 2: 10}
REGIME_PARAMS = {
    # (mu_p, var_p, mu_q, var_q)
    "bounded": (0.0, 0.4, 0.5, 0.3),
    "unbounded": (0.0, 0.3, 1.0, 0.5),
}


@dataclass(frozen=True)
class ScenarioConfig:
    case: int = 1
    regime: str = "bounded"
    n_p: int = 500
    n_q: int = 2000
    m: int = 25
    copula: CopulaParams | None = None
    noise_sd: float = 0.01
    lambda_sd: float = 0.1
    series_terms: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.case not in CASE_DIMS:
            raise ValueError(f"unknown case {self.case}")
        if self.regime not in REGIME_PARAMS:
            raise ValueError(f"unknown regime {self.regime!r}")
        for name in ("n_p", "n_q", "m", "series_terms"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise_sd < 0 or self.lambda_sd < 0:
            raise ValueError("standard deviations must be nonnegative")
        if self.copula is None:
            object.__setattr__(self, "copula",
                               CopulaParams(*REGIME_PARAMS[self.regime], d=self.d))
        elif self.copula.d != self.d:
            raise ValueError("copula dimension does not match the case")

    @property
    def d(self) -> int:
        return CASE_DIMS[self.case]

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)


def gen_covariates(domain: str, cfg: ScenarioConfig, n: int, m: int,
                   stream: str | None = None) -> RepeatedDataset:
    """n subjects with m rows each, X = Phi(Z), Z ~ N(mu 1_d, var I_d)."""
    if domain not in ("source", "target"):
        raise ValueError("domain must be 'source' or 'target'")
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    p = cfg.copula
    mu, var = (p.mu_p, p.var_p) if domain == "source" else (p.mu_q, p.var_q)
    sd = math.sqrt(var)
    stream = stream or domain
    z = np.empty((n * m, cfg.d))
    for i in range(n):
        rng = make_rng(cfg.seed, stream, "x", i)
        z[i * m:(i + 1) * m] = mu + sd * rng.standard_normal((m, cfg.d))
    x = norm_cdf(z)
    return RepeatedDataset(x, np.arange(0, n * m + 1, m))


def _check_dim(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != d:
        raise ValueError(f"expected dimension {d}, got {x.shape[-1]}")
    return x


def f0_case1(x):
    """sin(12 pi sum_l l x_l / (d (d+1))) with d = 3."""
    x = _check_dim(x, 3)
    d = 3
    s = x @ np.arange(1, d + 1, dtype=float)
    out = np.sin(12.0 * np.pi * s / (d * (d + 1)))
    return float(out) if out.ndim == 0 else out


def f0_case2(x):
    """sin(2 pi s1) cos(2 pi s2) with s1, s2 the means of x_1..x_5 and x_6..x_10."""
    x = _check_dim(x, 10)
    s1 = x[..., :5].sum(axis=-1) / 5.0
    s2 = x[..., 5:].sum(axis=-1) / 5.0
    out = np.sin(2.0 * np.pi * s1) * np.cos(2.0 * np.pi * s2)
    return float(out) if out.ndim == 0 else out


def oracle_f0(case: int):
    if case == 1:
        return f0_case1
    if case == 2:
        return f0_case2
    raise ValueError(f"unknown case {case}")


def random_effect(case: int, x: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Subject effect f_i at rows ``x`` for coefficients ``lam`` of shape (K, d) or (K, 2).

    Terms run over k = 2..K+1.
    """
    x = np.atleast_2d(x)
    k = np.arange(2, lam.shape[0] + 2, dtype=float)
    if case == 1:
        d = x.shape[1]
        arg = np.pi * k[None, :, None] * x[:, None, :]          # (m, K, d)
        basis = (np.sin(arg) + np.cos(arg)) / k[None, :, None]
        return math.sqrt(3.0) / math.sqrt(d) * np.einsum("mkl,kl->m", basis, lam)
    s = np.stack([x[:, :5].sum(axis=1) / 5.0, x[:, 5:].sum(axis=1) / 5.0], axis=1)
    arg = np.pi * k[None, :, None] * s[:, None, :]               # (m, K, 2)
    basis = (np.sin(arg) + np.cos(arg)) / k[None, :, None]
    return math.sqrt(3.0) / math.sqrt(2.0) * np.einsum("mkb,kb->m", basis, lam)


def gen_responses(cov: RepeatedDataset, cfg: ScenarioConfig, stream: str = "source") -> RepeatedDataset:
    """y_ij = f0(x_ij) + f_i(x_ij) + eps_ij, one coefficient draw per subject."""
    if cov.d != cfg.d:
        raise ValueError(f"covariates have dimension {cov.d}, case {cfg.case} needs {cfg.d}")
    f0 = oracle_f0(cfg.case)
    blocks = cfg.d if cfg.case == 1 else 2
    y = np.empty(cov.n_obs)
    for i in range(cov.n_subjects):
        lo, hi = cov.offsets[i], cov.offsets[i + 1]
        rng = make_rng(cfg.seed, stream, "y", i)
        lam = cfg.lambda_sd * rng.standard_normal((cfg.series_terms, blocks))
        eps = cfg.noise_sd * rng.standard_normal(hi - lo)
        xi = cov.x[lo:hi]
        y[lo:hi] = f0(xi) + random_effect(cfg.case, xi, lam) + eps
    return cov.with_responses(y)


def gen_dataset(domain: str, cfg: ScenarioConfig, n: int, m: int, stream: str | None = None,
                responses: bool = True) -> RepeatedDataset:
    stream = stream or domain
    cov = gen_covariates(domain, cfg, n, m, stream)
    return gen_responses(cov, cfg, stream) if responses else cov
