"""CSV ingestion, cleaning and export for repeated-measurements panels.

Missing values ("", "NA", "NaN", "null") are read as NaN and left for
``preprocess`` to handle; anything else that does not parse as a number is
an error that names the offending line.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import RepeatedDataset

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none"})


class PanelParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class PanelSchema:
    subject_col: str
    covariate_cols: tuple[str, ...]
    response_col: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariate_cols", tuple(self.covariate_cols))
        if not self.covariate_cols:
            raise SchemaError("at least one covariate column is required")
        names = [self.subject_col, *self.covariate_cols]
        if self.response_col is not None:
            names.append(self.response_col)
        if len(set(names)) != len(names):
            raise SchemaError("schema columns must be distinct")


def _parse_value(token: str, line: int, column: str) -> float:
    token = token.strip()
    if token.lower() in MISSING_TOKENS:
        return math.nan
    try:
        return float(token)
    except ValueError:
        raise PanelParseError(line, f"cannot parse {token!r} in column {column!r}") from None


def _data_lines(handle) -> Iterable[tuple[int, str]]:
    for number, text in enumerate(handle, start=1):
        if text.startswith("#") or not text.strip():
            continue
        yield number, text


def load_panel_csv(path, schema: PanelSchema) -> RepeatedDataset:
    """Read a long-format panel, grouping rows by subject in order of first appearance."""
    with open(path, newline="") as handle:
        lines = list(_data_lines(handle))
    if not lines:
        raise EmptyDatasetError(f"{path}: no header")
    numbers = [n for n, _ in lines]
    reader = csv.reader([t for _, t in lines])
    header = [h.strip() for h in next(reader)]
    wanted = [schema.subject_col, *schema.covariate_cols]
    if schema.response_col is not None:
        wanted.append(schema.response_col)
    missing = [c for c in wanted if c not in header]
    if missing:
        raise SchemaError(f"columns not in header: {', '.join(missing)}")
    pos = {c: header.index(c) for c in wanted}

    groups: dict[str, tuple[list, list]] = {}
    for line, row in zip(numbers[1:], reader):
        if len(row) != len(header):
            raise PanelParseError(line, f"expected {len(header)} fields, found {len(row)}")
        sid = row[pos[schema.subject_col]].strip()
        if not sid:
            raise PanelParseError(line, "empty subject identifier")
        xs, ys = groups.setdefault(sid, ([], []))
        xs.append([_parse_value(row[pos[c]], line, c) for c in schema.covariate_cols])
        if schema.response_col is not None:
            ys.append(_parse_value(row[pos[schema.response_col]], line, schema.response_col))
    if not groups:
        raise EmptyDatasetError(f"{path}: no data rows")
    labels = list(groups)
    xs = [np.array(groups[k][0], dtype=float) for k in labels]
    ys = [np.array(groups[k][1], dtype=float) for k in labels] \
        if schema.response_col is not None else None
    return RepeatedDataset.from_subjects(xs, ys, labels, schema.covariate_cols)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessSpec:
    response_col: str | None = None
    response_transform: str = "identity"
    log1p_cols: tuple[str, ...] = ()
    hours_retained: int | None = None
    drop_missing_rows: bool = True
    drop_missing_subjects_in_target: bool = True
    rescale: str = "minmax_to_unit_cube"

    def __post_init__(self):
        object.__setattr__(self, "log1p_cols", tuple(self.log1p_cols))
        if self.response_transform not in ("identity", "log"):
            raise PreprocessError(f"unknown response transform {self.response_transform!r}")
        if self.rescale not in ("minmax_to_unit_cube", "none"):
            raise PreprocessError(f"unknown rescale mode {self.rescale!r}")
        if self.hours_retained is not None and self.hours_retained < 1:
            raise PreprocessError("hours_retained must be positive")

    @classmethod
    def identity(cls) -> "PreprocessSpec":
        return cls(drop_missing_rows=False, drop_missing_subjects_in_target=False, rescale="none")


@dataclass(frozen=True)
class MinMaxScaler:
    """Per-column affine map (x - lo) / (hi - lo); constant columns map to 0."""

    columns: tuple[str, ...]
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, columns: Sequence[str]) -> "MinMaxScaler":
        if x.shape[0] == 0:
            raise PreprocessError("cannot fit a scaler on zero rows")
        return cls(tuple(columns), np.nanmin(x, axis=0), np.nanmax(x, axis=0))

    def transform(self, x: np.ndarray) -> tuple[np.ndarray, int]:
        """Scaled rows and the number of entries clamped into [0, 1]."""
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        z = (x - self.lo) / safe
        z = np.where(span > 0, z, 0.0)
        outside = int(np.count_nonzero((z < 0.0) | (z > 1.0)))
        return np.clip(z, 0.0, 1.0), outside

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return self.lo + z * (self.hi - self.lo)

    def format(self) -> str:
        lines = ["column,min,max"]
        lines += [f"{c},{lo:.17g},{hi:.17g}" for c, lo, hi in zip(self.columns, self.lo, self.hi)]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "MinMaxScaler":
        rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
        return cls(tuple(r[0] for r in rows), np.array([float(r[1]) for r in rows]),
                   np.array([float(r[2]) for r in rows]))

    def save(self, path) -> None:
        Path(path).write_text(self.format())

    @classmethod
    def load(cls, path) -> "MinMaxScaler":
        return cls.parse(Path(path).read_text())


@dataclass
class PreprocessReport:
    rows_in: int = 0
    rows_out: int = 0
    subjects_in: int = 0
    subjects_out: int = 0
    rows_dropped_missing: int = 0
    subjects_dropped_missing: int = 0
    rows_truncated: int = 0
    clamped_entries: int = 0
    clamped_fraction: float = 0.0
    notes: list[str] = field(default_factory=list)


def _keep_rows(data: RepeatedDataset, keep: np.ndarray) -> RepeatedDataset:
    """Row filter that keeps subject grouping and drops subjects left empty."""
    sid = data.subject_index()
    sizes = np.bincount(sid[keep], minlength=data.n_subjects)
    alive = np.flatnonzero(sizes > 0)
    if alive.size == 0:
        raise PreprocessError("no observations left after filtering")
    offsets = np.concatenate([[0], np.cumsum(sizes[alive])])
    y = None if data.y is None else data.y[keep]
    return RepeatedDataset(data.x[keep], offsets, y, tuple(data.labels[i] for i in alive),
                           data.columns)


def _row_missing(data: RepeatedDataset) -> np.ndarray:
    miss = np.isnan(data.x).any(axis=1)
    if data.y is not None:
        miss |= np.isnan(data.y)
    return miss


def preprocess(data: RepeatedDataset, spec: PreprocessSpec, scaler: MinMaxScaler | None = None,
               domain: str = "source") -> tuple[RepeatedDataset, MinMaxScaler | None, PreprocessReport]:
    """Clean one domain.

    Order: keep the first ``hours_retained`` rows of each subject, drop
    subjects with any missing value (target only), drop rows with missing
    values, transform, then min-max scale. Pass the source scaler when
    processing the target so both domains share one covariate map.
    """
    if domain not in ("source", "target"):
        raise PreprocessError("domain must be 'source' or 'target'")
    report = PreprocessReport(rows_in=data.n_obs, subjects_in=data.n_subjects)
    if spec.response_col is not None and spec.response_col in data.columns:
        raise PreprocessError(f"response column {spec.response_col!r} is also a covariate")
    for col in spec.log1p_cols:
        if col not in data.columns:
            raise PreprocessError(f"unknown column {col!r}")
    full_missing = [c for c, col in zip(data.columns, data.x.T) if col.size and np.isnan(col).all()]
    if data.y is not None and data.y.size and np.isnan(data.y).all():
        full_missing.append(spec.response_col or "response")
    if full_missing:
        raise PreprocessError(f"column fully missing: {', '.join(full_missing)}")

    if spec.hours_retained is not None:
        pos = np.arange(data.n_obs) - np.repeat(data.offsets[:-1], data.sizes)
        keep = pos < spec.hours_retained
        report.rows_truncated = int(np.count_nonzero(~keep))
        data = _keep_rows(data, keep)

    if domain == "target" and spec.drop_missing_subjects_in_target:
        bad = np.bincount(data.subject_index(), weights=_row_missing(data),
                          minlength=data.n_subjects) > 0
        report.subjects_dropped_missing = int(np.count_nonzero(bad))
        if bad.all():
            raise PreprocessError("every target subject has a missing value")
        data = data.subset(np.flatnonzero(~bad))

    if spec.drop_missing_rows:
        miss = _row_missing(data)
        report.rows_dropped_missing = int(np.count_nonzero(miss))
        data = _keep_rows(data, ~miss)

    x = data.x.copy()
    for col in spec.log1p_cols:
        j = data.columns.index(col)
        if np.any(x[:, j] <= -1.0):
            raise PreprocessError(f"log1p needs values above -1 in column {col!r}")
        x[:, j] = np.log1p(x[:, j])
    y = data.y
    if y is not None and spec.response_transform == "log":
        if np.any(y <= 0.0):
            raise PreprocessError("log response transform needs positive responses")
        y = np.log(y)

    if spec.rescale == "minmax_to_unit_cube":
        if scaler is None:
            if domain == "target":
                report.notes.append("target scaled with its own ranges")
            scaler = MinMaxScaler.fit(x, data.columns)
        x, report.clamped_entries = scaler.transform(x)
        report.clamped_fraction = report.clamped_entries / max(1, x.size)
    out = RepeatedDataset(x, data.offsets, y, data.labels, data.columns)
    report.rows_out, report.subjects_out = out.n_obs, out.n_subjects
    return out, scaler, report


def preprocess_pair(source: RepeatedDataset, target: RepeatedDataset, spec: PreprocessSpec,
                    joint_range: bool = False):
    """Process both domains with one scaler fitted on the source (or on both)."""
    src, scaler, src_report = preprocess(source, spec, None, "source")
    if joint_range and spec.rescale == "minmax_to_unit_cube":
        unscaled = PreprocessSpec(**{**spec.__dict__, "rescale": "none"})
        raw_src, _, _ = preprocess(source, unscaled, None, "source")
        raw_tgt, _, _ = preprocess(target, unscaled, None, "target")
        scaler = MinMaxScaler.fit(np.vstack([raw_src.x, raw_tgt.x]), raw_src.columns)
        src, _, src_report = preprocess(source, spec, scaler, "source")
    tgt, _, tgt_report = preprocess(target, spec, scaler, "target")
    return src, tgt, scaler, src_report, tgt_report


# ---------------------------------------------------------------------------
# binned error summary


@dataclass(frozen=True)
class BinnedError:
    mean_true: float
    mse: float
    count: int


def binned_mse(true_y, pred_y, bins: int = 10) -> list[BinnedError]:
    """Squared error within quantile bins of the true response.

    Samples are ordered by true value (stable, so ties keep input order) and
    cut into ``bins`` consecutive groups whose sizes differ by at most one.
    """
    t = np.asarray(true_y, dtype=float).ravel()
    p = np.asarray(pred_y, dtype=float).ravel()
    if t.shape != p.shape:
        raise ValueError("true and predicted vectors differ in length")
    if t.size == 0:
        raise ValueError("empty input")
    if bins < 1:
        raise ValueError("bins must be positive")
    order = np.argsort(t, kind="stable")
    out = []
    for idx in np.array_split(order, min(bins, t.size)):
        err = p[idx] - t[idx]
        out.append(BinnedError(float(t[idx].mean()), float(np.mean(err * err)), int(idx.size)))
    return out


# ---------------------------------------------------------------------------
# export


def manifest_line(manifest: dict) -> str:
    return "# manifest: " + json.dumps(manifest, sort_keys=True, default=str)


def read_manifest(path) -> dict | None:
    with open(path) as handle:
        for text in handle:
            if text.startswith("# manifest: "):
                return json.loads(text[len("# manifest: "):])
            if not text.startswith("#"):
                return None
    return None


def write_table(path, header: Sequence[str], rows: Iterable[Sequence], manifest: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        if manifest is not None:
            handle.write(manifest_line(manifest) + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


def export_dataset_csv(data: RepeatedDataset, path, manifest: dict | None = None) -> None:
    """Long format: subject_id, obs_id, covariates, then y when present."""
    header = ["subject_id", "obs_id", *data.columns] + (["y"] if data.has_responses else [])

    def rows():
        for i, (x, y) in enumerate(data):
            for j in range(x.shape[0]):
                row = [data.labels[i], j, *map(float, x[j])]
                if y is not None:
                    row.append(float(y[j]))
                yield row

    write_table(path, header, rows(), manifest)


def import_dataset_csv(path) -> RepeatedDataset:
    """Inverse of ``export_dataset_csv``."""
    with open(path, newline="") as handle:
        for _, text in _data_lines(handle):
            header = next(csv.reader([text]))
            break
        else:
            raise EmptyDatasetError(f"{path}: no header")
    covs = tuple(c for c in header if c not in ("subject_id", "obs_id", "y"))
    schema = PanelSchema("subject_id", covs, "y" if "y" in header else None)
    data = load_panel_csv(path, schema)
    labels = tuple(int(s) if s.lstrip("-").isdigit() else s for s in data.labels)
    return RepeatedDataset(data.x, data.offsets, data.y, labels, data.columns)
