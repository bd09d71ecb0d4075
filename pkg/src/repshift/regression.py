"""Target-domain regression under covariate shift.

Three estimators share one network recipe and differ only in the sample
weights and the data they see:

* URE: ratio estimated on one half of the source subjects (plus target
  covariates), regression fitted on the other half with the estimated ratio
  as weights.
* KRE: regression on all source data weighted by a known ratio.
* NE: unweighted regression on all source data.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import RepeatedDataset
from .density_ratio import (RatioModel, fit_ratio, format_ratio, parse_ratio,
                            percentile_clip_level, ratio_train_config)
from .nn import (MlpNetwork, NesterovSGD, OutputActivation, RegressionData, SquaredLoss,
                 TrainConfig, load_network, save_network, train)
from .rng import make_rng

REGRESSION_HIDDEN = (128, 128, 128)
ESTIMATORS = ("NE", "KRE", "URE")


class InvalidSplitError(ValueError):
    pass


def regression_train_config(seed: int = 0, **overrides) -> TrainConfig:
    kw = dict(optimizer=NesterovSGD(lr=0.01, momentum=0.9, decay_factor=0.5), max_epochs=200,
              batch_size=32, early_stop_patience=20, seed=seed, warmup_epochs=1)
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass(frozen=True)
class SplitRecord:
    n1: int
    first: tuple[int, ...]
    second: tuple[int, ...]
    seed: int


@dataclass(frozen=True, eq=False)
class FittedRegression:
    net: MlpNetwork
    estimator_kind: str
    ratio_used: RatioModel | None = None
    split_record: SplitRecord | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.estimator_kind not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator_kind!r}")
        if self.estimator_kind == "NE" and self.ratio_used is not None:
            raise ValueError("the naive estimator uses no ratio")
        if self.estimator_kind == "KRE" and (self.ratio_used is None or not self.ratio_used.is_known):
            raise ValueError("the known-ratio estimator needs a known ratio")

    def predict(self, x):
        return predict(self, x)


def predict(model: FittedRegression, x):
    """Network forward pass on one point (d,) or rows (n, d)."""
    return model.net(x)


def split_source(data: RepeatedDataset, fraction: float = 0.5,
                 seed: int = 0) -> tuple[RepeatedDataset, RepeatedDataset]:
    """Partition subjects (never rows) into floor(fraction * n) and the rest."""
    n = data.n_subjects
    if n < 2:
        raise InvalidSplitError("need at least two subjects to split")
    if not 0.0 < fraction < 1.0:
        raise InvalidSplitError("fraction must lie in (0, 1)")
    k = int(math.floor(fraction * n))
    if k == 0 or k == n:
        raise InvalidSplitError(f"fraction {fraction} leaves an empty part of {n} subjects")
    perm = make_rng(seed, "split").permutation(n)
    first, second = np.sort(perm[:k]), np.sort(perm[k:])
    return data.subset(first), data.subset(second)


def _split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    k = int(math.floor(fraction * n))
    perm = make_rng(seed, "split").permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])


def weighted_erm_loss(f: Callable, data: RepeatedDataset, ratio: RatioModel) -> float:
    """(1/N) sum_ij r(x_ij) (y_ij - f(x_ij))^2."""
    if data.y is None:
        raise ValueError("weighted loss needs responses")
    pred = f.predict(data.x) if hasattr(f, "predict") else np.asarray(f(data.x), dtype=float)
    resid = data.y - pred
    return float(np.mean(ratio.evaluate(data.x) * resid * resid))


def truncate_output(net: MlpNetwork, bound: float | None) -> MlpNetwork:
    """Compose a fitted network with the symmetric clip T_B(f) = max(-B, min(f, B)).

    When B >= sup|f0| this can only move predictions closer to f0, and it
    keeps linear extrapolation of ReLU fits from running away in parts of the
    target domain that the source never visits.
    """
    if bound is None:
        return net
    if not bound > 0:
        raise ValueError("bound must be positive")
    out = net.output
    return net.with_output(OutputActivation(out.softplus, out.upper, float(bound)))


def _fit_network(train_ds: RepeatedDataset, weights: np.ndarray | None,
                 validation: RepeatedDataset | None, val_weights: np.ndarray | None,
                 cfg: TrainConfig, hidden: Sequence[int], output: OutputActivation | None,
                 bound: float | None = None):
    train_ds.require_responses()
    net = MlpNetwork.init_he([train_ds.d, *hidden, 1], make_rng(cfg.seed, "init"), output)
    if weights is not None and not np.any(weights > 0):
        raise ValueError("ratio weights vanish on the training sample")
    data = RegressionData(train_ds.x, train_ds.y, weights)
    val = None
    if validation is not None:
        validation.require_responses()
        val = RegressionData(validation.x, validation.y, val_weights)
    # heavy importance weights make raw weighted steps erratic enough to kill
    # ReLU units early on, so weights enter through resampled batches
    loss = SquaredLoss(resample=weights is not None)
    fitted = train(net, loss, data, cfg, val, make_rng(cfg.seed, "shuffle"))
    return truncate_output(fitted, bound)


def fit_naive(source: RepeatedDataset, cfg: TrainConfig | None = None,
              validation: RepeatedDataset | None = None,
              hidden: Sequence[int] = REGRESSION_HIDDEN,
              output: OutputActivation | None = None,
              bound: float | None = None) -> FittedRegression:
    cfg = cfg or regression_train_config()
    net = _fit_network(source, None, validation, None, cfg, hidden, output, bound)
    return FittedRegression(net, "NE", info={"seed": cfg.seed, "bound": bound})


def fit_kre(source: RepeatedDataset, ratio: RatioModel, cfg: TrainConfig | None = None,
            validation: RepeatedDataset | None = None,
            hidden: Sequence[int] = REGRESSION_HIDDEN,
            output: OutputActivation | None = None,
            bound: float | None = None) -> FittedRegression:
    """Weighted least squares over all source rows with a known ratio."""
    cfg = cfg or regression_train_config()
    w = ratio.evaluate(source.x)
    vw = ratio.evaluate(validation.x) if validation is not None else None
    net = _fit_network(source, w, validation, vw, cfg, hidden, output, bound)
    return FittedRegression(net, "KRE", ratio,
                            info={"seed": cfg.seed, "xi": ratio.clip_level, "bound": bound})


def fit_ure(source: RepeatedDataset, target_cov: RepeatedDataset, cfg: TrainConfig | None = None,
            ratio_cfg: TrainConfig | None = None, validation: RepeatedDataset | None = None,
            ratio_validation: RepeatedDataset | None = None, clip: float | str | None = None,
            split_seed: int = 0, fraction: float = 0.5, target_val_fraction: float = 0.2,
            hidden: Sequence[int] = REGRESSION_HIDDEN,
            output: OutputActivation | None = None,
            bound: float | None = None) -> FittedRegression:
    """Estimated-ratio regression with subject-level sample splitting.

    ``clip`` is None (no truncation), a positive level (trained with the clip
    layer) or ``"percentile"`` (95th percentile of the fitted ratio over the
    ratio half, applied after fitting). When ``ratio_validation`` is given, a
    ``target_val_fraction`` share of target subjects is held out with it for
    early stopping of the ratio network.
    """
    cfg = cfg or regression_train_config()
    ratio_cfg = ratio_cfg or ratio_train_config(seed=cfg.seed)
    source.require_responses()
    n = source.n_subjects
    if n < 2:
        raise InvalidSplitError("need at least two subjects to split")
    k = int(math.floor(fraction * n))
    if k == 0 or k == n:
        raise InvalidSplitError(f"fraction {fraction} leaves an empty part of {n} subjects")
    first, second = _split_indices(n, fraction, split_seed)
    reg_part, ratio_part = source.subset(first), source.subset(second)

    target_train, val_pair = target_cov, None
    if ratio_validation is not None and target_cov.n_subjects >= 2:
        n_val = max(1, int(round(target_val_fraction * target_cov.n_subjects)))
        if n_val < target_cov.n_subjects:
            perm = make_rng(split_seed, "target-val").permutation(target_cov.n_subjects)
            target_train = target_cov.subset(np.sort(perm[n_val:]))
            val_pair = (ratio_validation, target_cov.subset(np.sort(perm[:n_val])))

    level = clip if not isinstance(clip, str) else None
    ratio = fit_ratio(ratio_part, target_train, ratio_cfg, clip=level, validation=val_pair)
    if clip == "percentile":
        ratio = ratio.clipped(percentile_clip_level(ratio, ratio_part))
    elif isinstance(clip, str):
        raise ValueError(f"unknown clip policy {clip!r}")

    w = ratio.evaluate(reg_part.x)
    vw = ratio.evaluate(validation.x) if validation is not None else None
    net = _fit_network(reg_part, w, validation, vw, cfg, hidden, output, bound)
    split = SplitRecord(k, tuple(int(i) for i in first), tuple(int(i) for i in second), split_seed)
    info = {"seed": cfg.seed, "ratio_seed": ratio_cfg.seed, "xi": ratio.clip_level,
            "clip_policy": clip if clip is None or isinstance(clip, str) else "fixed",
            "bound": bound}
    return FittedRegression(net, "URE", ratio, split, info)


# ---------------------------------------------------------------------------
# persistence: network file plus a JSON metadata sidecar


def save_fitted(model: FittedRegression, path) -> None:
    path = Path(path)
    save_network(model.net, path)
    meta = {"estimator_kind": model.estimator_kind, "info": model.info}
    if model.split_record is not None:
        meta["split"] = {"n1": model.split_record.n1, "seed": model.split_record.seed,
                         "first": list(model.split_record.first),
                         "second": list(model.split_record.second)}
    if model.ratio_used is not None:
        meta["ratio"] = format_ratio(model.ratio_used)
    path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(meta, indent=2))


def load_fitted(path) -> FittedRegression:
    path = Path(path)
    net = load_network(path)
    meta = json.loads(path.with_suffix(path.suffix + ".meta.json").read_text())
    ratio = parse_ratio(meta["ratio"]) if "ratio" in meta else None
    split = None
    if "split" in meta:
        s = meta["split"]
        split = SplitRecord(s["n1"], tuple(s["first"]), tuple(s["second"]), s["seed"])
    return FittedRegression(net, meta["estimator_kind"], ratio, split, meta.get("info", {}))
