"""Density-ratio models: least-squares fitted networks, the closed-form ratio of
two Gaussian copulas, and constants; each optionally truncated at a level xi."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import RepeatedDataset
from .nn import (Adam, LsifLoss, MlpNetwork, OutputActivation, RatioData, TrainConfig,
                 format_network, parse_network, train)
from .normal import clamped_ppf
from .rng import make_rng

RATIO_HIDDEN = (64, 64)


@dataclass(frozen=True)
class CopulaParams:
    """X = Phi(Z) with Z ~ N(mu 1_d, var I_d) under source (p) and target (q)."""

    mu_p: float
    var_p: float
    mu_q: float
    var_q: float
    d: int

    def __post_init__(self):
        if not (self.var_p > 0 and self.var_q > 0):
            raise ValueError("variances must be positive")
        if int(self.d) < 1:
            raise ValueError("dimension must be positive")

    @property
    def is_bounded(self) -> bool:
        # equal variances with different means give exp(linear(z)), unbounded
        if self.var_p == self.var_q:
            return self.mu_p == self.mu_q
        return self.var_p > self.var_q

    @property
    def has_finite_second_moment(self) -> bool:
        return self.is_bounded or self.var_q / 2.0 < self.var_p

    @property
    def regime(self) -> str:
        if self.is_bounded:
            return "bounded"
        if self.var_q / 2.0 <= self.var_p <= self.var_q:
            return "unbounded"
        return "heavy"

    def sup_bound(self) -> float:
        """Analytic supremum of the ratio over the cube (inf when unbounded)."""
        if not self.is_bounded:
            return math.inf
        sp, sq = math.sqrt(self.var_p), math.sqrt(self.var_q)
        if self.var_p == self.var_q:
            return 1.0
        expo = (self.mu_q - self.mu_p) ** 2 / (2.0 * (self.var_p - self.var_q))
        return (sp / sq) ** self.d * math.exp(self.d * expo)

    def swap(self) -> "CopulaParams":
        return CopulaParams(self.mu_q, self.var_q, self.mu_p, self.var_p, self.d)


def log_copula_ratio(p: CopulaParams, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != p.d:
        raise ValueError(f"expected dimension {p.d}, got {x.shape[1]}")
    z = clamped_ppf(x)
    per = (0.5 * math.log(p.var_p / p.var_q)
           - (z - p.mu_q) ** 2 / (2.0 * p.var_q)
           + (z - p.mu_p) ** 2 / (2.0 * p.var_p))
    return per.sum(axis=1)


def exact_copula_ratio(p: CopulaParams, x):
    """q_X(x) / p_X(x) for the copula pair; scalar in, scalar out."""
    x = np.asarray(x, dtype=float)
    out = np.exp(log_copula_ratio(p, x))
    return float(out[0]) if x.ndim == 1 else out


@dataclass(frozen=True, eq=False)
class RatioModel:
    kind: str
    net: MlpNetwork | None = None
    copula: CopulaParams | None = None
    constant: float | None = None
    clip_level: float | None = None

    def __post_init__(self):
        if self.kind == "fitted" and self.net is None:
            raise ValueError("fitted ratio needs a network")
        if self.kind == "exact_copula" and self.copula is None:
            raise ValueError("exact ratio needs copula parameters")
        if self.kind == "constant" and (self.constant is None or self.constant < 0):
            raise ValueError("constant ratio must be nonnegative")
        if self.kind not in ("fitted", "exact_copula", "constant"):
            raise ValueError(f"unknown ratio kind {self.kind!r}")
        if self.clip_level is not None and not self.clip_level > 0:
            raise ValueError("clip level must be positive")

    @classmethod
    def fitted(cls, net: MlpNetwork, clip_level: float | None = None) -> "RatioModel":
        return cls("fitted", net=net, clip_level=clip_level)

    @classmethod
    def exact(cls, copula: CopulaParams, clip_level: float | None = None) -> "RatioModel":
        return cls("exact_copula", copula=copula, clip_level=clip_level)

    @classmethod
    def const(cls, c: float) -> "RatioModel":
        return cls("constant", constant=float(c))

    @property
    def is_known(self) -> bool:
        return self.kind != "fitted"

    def clipped(self, xi: float | None) -> "RatioModel":
        return RatioModel(self.kind, self.net, self.copula, self.constant, xi)

    def unclipped(self) -> "RatioModel":
        net = self.net.with_output(self.net.output.with_clip(None)) if self.net else None
        return RatioModel(self.kind, net, self.copula, self.constant, None)

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        rows = np.atleast_2d(x)
        if self.kind == "fitted":
            vals = self.net.predict(rows)
        elif self.kind == "exact_copula":
            vals = np.exp(log_copula_ratio(self.copula, rows))
        else:
            vals = np.full(rows.shape[0], self.constant)
        if self.clip_level is not None:
            vals = np.minimum(vals, self.clip_level)
        return float(vals[0]) if x.ndim == 1 else vals

    __call__ = evaluate


def _rows(data) -> np.ndarray:
    if isinstance(data, RepeatedDataset):
        return data.x
    return np.atleast_2d(np.asarray(data, dtype=float))


def _values(v: Callable, rows: np.ndarray) -> np.ndarray:
    if isinstance(v, MlpNetwork):
        return v.predict(rows)
    return np.asarray(v(rows), dtype=float).ravel()


def lsif_empirical_loss(v: Callable, source_batch, target_batch) -> float:
    """(1/(2 n_s)) sum v(x_s)^2 - (1/n_t) sum v(x_t) over flattened rows."""
    xs, xt = _rows(source_batch), _rows(target_batch)
    if xs.shape[0] == 0 or xt.shape[0] == 0:
        raise ValueError("empty source or target batch")
    vs = _values(v, xs)
    vt = _values(v, xt)
    return 0.5 * float(np.mean(vs * vs)) - float(np.mean(vt))


def ratio_train_config(seed: int = 0, **overrides) -> TrainConfig:
    kw = dict(optimizer=Adam(lr=1e-3, decay_factor=0.5), max_epochs=200, batch_size=128,
              early_stop_patience=20, seed=seed)
    kw.update(overrides)
    return TrainConfig(**kw)


def fit_ratio(source_cov, target_cov, cfg: TrainConfig | None = None, clip: float | None = None,
              validation: tuple | None = None, hidden: Sequence[int] = RATIO_HIDDEN) -> RatioModel:
    """Fit r(x) = q(x)/p(x) by minimising the empirical least-squares risk.

    Repeated measurements are flattened. The network has ReLU hidden layers
    and a softplus output, composed with min(., clip) when ``clip`` is given.
    ``validation`` is an optional (source, target) pair of held-out covariates
    used for early stopping.
    """
    cfg = cfg or ratio_train_config()
    xs, xt = _rows(source_cov), _rows(target_cov)
    for arr in (xs, xt):
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("covariates must lie in [0, 1]^d")
    if clip is not None and not clip > 0:
        raise ValueError("clip level must be positive")
    d = xs.shape[1]
    output = OutputActivation(softplus=True, upper=clip)
    net = MlpNetwork.init_he([d, *hidden, 1], make_rng(cfg.seed, "init"), output)
    val = None
    if validation is not None:
        val = RatioData(_rows(validation[0]), _rows(validation[1]))
    fitted = train(net, LsifLoss(), RatioData(xs, xt), cfg, val, make_rng(cfg.seed, "shuffle"))
    return RatioModel.fitted(fitted, clip)


def percentile_clip_level(model: RatioModel, source_cov, q: float = 95.0) -> float:
    """q-th percentile of the unclipped ratio over source covariates."""
    vals = model.unclipped().evaluate(_rows(source_cov))
    level = float(np.percentile(vals, q))
    if not level > 0:
        level = float(np.max(vals)) if np.max(vals) > 0 else 1.0
    return level


def moment_diagnostic(model: RatioModel, source_cov, delta: float) -> float:
    """Empirical E_P[r(X)^(delta+2)] over source covariates."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    vals = model.evaluate(_rows(source_cov))
    return float(np.mean(vals ** (delta + 2.0)))


def relative_l2_error(model: RatioModel, reference: RatioModel, source_cov) -> float:
    """||model - reference||_{L2(P)} / ||reference||_{L2(P)} by Monte Carlo."""
    x = _rows(source_cov)
    a, b = model.evaluate(x), reference.evaluate(x)
    return float(np.sqrt(np.mean((a - b) ** 2) / np.mean(b ** 2)))


# ---------------------------------------------------------------------------
# persistence


def format_ratio(model: RatioModel) -> str:
    clip = "none" if model.clip_level is None else f"{model.clip_level:.17g}"
    if model.kind == "fitted":
        return format_network(model.net) + f"clip: {clip}\n"
    if model.kind == "exact_copula":
        p = model.copula
        return (f"kind: exact_copula\nmu_p: {p.mu_p:.17g}\nvar_p: {p.var_p:.17g}\n"
                f"mu_q: {p.mu_q:.17g}\nvar_q: {p.var_q:.17g}\nd: {p.d}\nclip: {clip}\n")
    return f"kind: constant\nvalue: {model.constant:.17g}\nclip: {clip}\n"


def parse_ratio(text: str) -> RatioModel:
    fields = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition(":")
            fields[k.strip()] = v.strip()
    clip_txt = fields.get("clip", "none")
    clip = None if clip_txt == "none" else float(clip_txt)
    kind = fields.get("kind", "fitted")
    if kind == "exact_copula":
        p = CopulaParams(float(fields["mu_p"]), float(fields["var_p"]), float(fields["mu_q"]),
                         float(fields["var_q"]), int(fields["d"]))
        return RatioModel.exact(p, clip)
    if kind == "constant":
        return RatioModel("constant", constant=float(fields["value"]), clip_level=clip)
    net, _ = parse_network(text)
    return RatioModel.fitted(net, clip)


def save_ratio(model: RatioModel, path) -> None:
    Path(path).write_text(format_ratio(model))


def load_ratio(path) -> RatioModel:
    return parse_ratio(Path(path).read_text())
