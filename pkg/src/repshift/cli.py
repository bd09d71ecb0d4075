"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration or input, 3 training diverged.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .data import RepeatedDataset
from .dataio import (EmptyDatasetError, PanelParseError, SchemaError, binned_mse,
                     export_dataset_csv, import_dataset_csv, write_table)
from .density_ratio import (CopulaParams, RatioModel, fit_ratio, load_ratio,
                            percentile_clip_level, ratio_train_config, save_ratio)
from .harness import UNBOUNDED_XI, ExperimentConfig, approx_benchmark, format_table, prediction_mse, run_experiment
from .nn import TrainingDivergedError
from .regression import (fit_kre, fit_naive, fit_ure, load_fitted, regression_train_config,
                         save_fitted)
from .simgen import ScenarioConfig, gen_dataset, oracle_f0

log = logging.getLogger("repshift")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    pass


SCENARIO_KEYS = {f.name for f in fields(ScenarioConfig)} - {"copula", "seed"}
COPULA_KEYS = ("mu_p", "var_p", "mu_q", "var_q")
EXPERIMENT_KEYS = {"methods", "replications", "eval_n_q", "parallelism", "xi",
                   "response_bound", "max_epochs"}


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCENARIO_KEYS | EXPERIMENT_KEYS | set(COPULA_KEYS):
            raise ConfigError(f"{path}:{number}: unknown key {key!r}")
        out[key] = value
    return out


def _number(key: str, value: str, kind=float):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def scenario_from(conf: dict[str, str], seed: int) -> ScenarioConfig:
    kw = {}
    for key in SCENARIO_KEYS & conf.keys():
        if key == "regime":
            kw[key] = conf[key]
        elif key in ("case", "n_p", "n_q", "m", "series_terms"):
            kw[key] = _number(key, conf[key], int)
        else:
            kw[key] = _number(key, conf[key])
    try:
        sc = ScenarioConfig(seed=seed, **kw)
        given = [k for k in COPULA_KEYS if k in conf]
        if given:
            base = sc.copula
            vals = {k: _number(k, conf[k]) if k in conf else getattr(base, k) for k in COPULA_KEYS}
            sc = replace(sc, copula=CopulaParams(**vals, d=sc.d))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return sc


def experiment_from(conf: dict[str, str], seed: int, out: str | None) -> ExperimentConfig:
    sc = scenario_from(conf, seed)
    kw = {}
    if "methods" in conf:
        kw["methods"] = tuple(m.strip() for m in conf["methods"].split(",") if m.strip())
    for key in ("replications", "eval_n_q", "parallelism", "max_epochs"):
        if key in conf:
            kw[key] = _number(key, conf[key], int)
    if "xi" in conf:
        v = conf["xi"]
        kw["xi"] = v if v in ("auto", "none", "percentile") else _number("xi", v)
    if "response_bound" in conf:
        v = conf["response_bound"]
        kw["response_bound"] = None if v == "none" else _number("response_bound", v)
    try:
        return ExperimentConfig(sc, output_dir=out, master_seed=seed, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _out_path(args, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


def _load(path) -> RepeatedDataset:
    try:
        return import_dataset_csv(path)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, conf) -> int:
    sc = scenario_from(conf, args.seed)
    out = _out_path(args, "data")
    out.mkdir(parents=True, exist_ok=True)
    meta = {"scenario": {f.name: getattr(sc, f.name) for f in fields(sc)}}
    domains = ("source", "target") if args.domain == "both" else (args.domain,)
    for dom in domains:
        n = args.n or (sc.n_p if dom == "source" else sc.n_q)
        data = gen_dataset(dom, sc, n, args.m or sc.m, responses=True)
        path = out / f"{dom}.csv"
        export_dataset_csv(data, path, {**meta, "domain": dom, "n": n})
        print(path)
    return 0


def _clip_arg(value: str | None, conf: dict[str, str] | None = None, seed: int = 0):
    """Parse ``--clip``; ``auto`` truncates at the harness level only for unbounded copulas."""
    if value == "auto":
        bounded = scenario_from(conf or {}, seed).copula.is_bounded
        return None if bounded else UNBOUNDED_XI
    if value is None or value == "none":
        return None
    if value == "percentile":
        return "percentile"
    try:
        level = float(value)
    except ValueError:
        raise ConfigError(f"clip must be a number, 'percentile' or 'none', not {value!r}") from None
    if not level > 0:
        raise ConfigError("clip must be positive")
    return level


def cmd_fit_ratio(args, conf) -> int:
    source, target = _load(args.source), _load(args.target)
    clip = _clip_arg(args.clip)
    cfg = ratio_train_config(args.seed)
    model = fit_ratio(source, target, cfg, clip=None if clip == "percentile" else clip)
    if clip == "percentile":
        model = model.clipped(percentile_clip_level(model, source))
    out = _out_path(args, "ratio.txt")
    save_ratio(model, out)
    print(out)
    return 0


def cmd_fit(args, conf) -> int:
    source = _load(args.source)
    validation = _load(args.validation) if args.validation else None
    cfg = regression_train_config(args.seed)
    bound = None if args.bound == "none" else float(args.bound)
    method = args.method.upper()
    if method == "NE":
        model = fit_naive(source, cfg, validation, bound=bound)
    elif method == "KRE":
        if args.ratio:
            ratio = load_ratio(args.ratio)
        else:
            ratio = RatioModel.exact(scenario_from(conf, args.seed).copula)
        clip = _clip_arg(args.clip, conf, args.seed)
        if clip == "percentile":
            ratio = ratio.clipped(percentile_clip_level(ratio, source))
        elif clip is not None:
            ratio = ratio.clipped(clip)
        model = fit_kre(source, ratio, cfg, validation, bound=bound)
    else:
        if not args.target:
            raise ConfigError("--target is required for the URE method")
        clip = _clip_arg(args.clip, conf, args.seed)
        model = fit_ure(source, _load(args.target), cfg, ratio_train_config(args.seed),
                        validation, clip=clip, split_seed=args.seed, bound=bound)
    out = _out_path(args, f"{method.lower()}.net")
    save_fitted(model, out)
    print(out)
    return 0


def cmd_evaluate(args, conf) -> int:
    model = load_fitted(args.model)
    data = _load(args.data)
    if args.against == "oracle":
        case = int(conf.get("case", args.case))
        value = prediction_mse(model, data, oracle_f0(case))
    else:
        data.require_responses()
        value = prediction_mse(model, data, lambda x: data.y)
    print(f"mse {value:.17g}")
    if args.out:
        pred = model.predict(data.x)
        write_table(args.out, ("subject_id", "obs_id", "prediction"),
                    ([data.labels[i], j, float(pred[k])]
                     for k, (i, j) in enumerate(_row_ids(data))))
    return 0


def _row_ids(data):
    for i, size in enumerate(data.sizes):
        for j in range(size):
            yield i, j


def cmd_experiment(args, conf) -> int:
    cfg = experiment_from(conf, args.seed, str(_out_path(args, "results")))
    if args.replications:
        cfg = replace(cfg, replications=args.replications)
    if args.parallelism:
        cfg = replace(cfg, parallelism=args.parallelism)
    rows, _ = run_experiment(cfg, progress=log.info)
    print(format_table(rows))
    print(f"(MSE shown x10; stored unscaled in {cfg.output_dir}/results.csv)")
    return 0


def cmd_approx_bench(args, conf) -> int:
    rows = approx_benchmark(args.zeta, args.N, n_points=args.points, seed=args.seed,
                            out_path=_out_path(args, "approx_bench.csv"))
    for r in rows:
        print(f"{r.function:28s} zeta={r.zeta:g} N={r.N:3d} sup_error={r.sup_error:.3e} "
              f"certificate={r.certificate:.3e}")
    return 0


def cmd_binned_mse(args, conf) -> int:
    try:
        table = np.genfromtxt(args.input, delimiter=",", names=True, comments="#")
    except OSError:
        raise ConfigError(f"no such file: {args.input}") from None
    names = table.dtype.names or ()
    for col in (args.true_col, args.pred_col):
        if col not in names:
            raise ConfigError(f"column {col!r} not in {args.input}")
    bins = binned_mse(table[args.true_col], table[args.pred_col], args.bins)
    rows = [[b.mean_true, b.mse, b.count] for b in bins]
    if args.out:
        write_table(args.out, ("bin_mean_true", "mse", "count"), rows)
    for mean, mse, count in rows:
        print(f"{mean:.6g},{mse:.6g},{count}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repshift",
                                     description="Covariate-shift regression with repeated measurements")
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--out", help="output file or directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate simulated datasets as CSV")
    p.add_argument("--domain", choices=("source", "target", "both"), default="both")
    p.add_argument("--n", type=int, help="number of subjects (default from config)")
    p.add_argument("--m", type=int, help="observations per subject")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-ratio", help="fit a density ratio from two covariate CSVs")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--clip", help="truncation level, 'percentile' or 'none'")
    p.set_defaults(func=cmd_fit_ratio)

    p = sub.add_parser("fit", help="fit a regression estimator")
    p.add_argument("--method", choices=("ne", "kre", "ure"), type=str.lower, required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", help="target covariates (URE)")
    p.add_argument("--validation", help="source-distributed validation CSV")
    p.add_argument("--ratio", help="ratio file for KRE (default: exact copula ratio)")
    p.add_argument("--clip", default="auto",
                   help="truncation level, 'percentile', 'none' or 'auto' (by the config regime)")
    p.add_argument("--bound", default="1.0", help="output truncation bound or 'none'")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="prediction MSE of a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--against", choices=("oracle", "responses"), default="oracle")
    p.add_argument("--case", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="Monte Carlo comparison of NE, KRE and URE")
    p.add_argument("--replications", type=int)
    p.add_argument("--parallelism", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("approx-bench", help="simplicial approximation error vs certificate")
    p.add_argument("--zeta", type=float, nargs="+", default=[1.0, 2.0])
    p.add_argument("--N", type=int, nargs="+", default=[4, 8, 16, 32])
    p.add_argument("--points", type=int, default=10_000)
    p.set_defaults(func=cmd_approx_bench)

    p = sub.add_parser("binned-mse", help="MSE within quantile bins of the true response")
    p.add_argument("--input", required=True)
    p.add_argument("--true-col", default="true")
    p.add_argument("--pred-col", default="pred")
    p.add_argument("--bins", type=int, default=10)
    p.set_defaults(func=cmd_binned_mse)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        conf = read_config(args.config) if args.config else {}
        return args.func(args, conf)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, SchemaError, PanelParseError, EmptyDatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
