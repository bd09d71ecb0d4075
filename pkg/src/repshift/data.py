"""Repeated-measurements datasets: rows grouped by subject."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class RepeatedDataset:
    """Covariate rows (and optional responses) grouped into subjects.

    Rows of one subject are stored contiguously; ``offsets[i]:offsets[i+1]``
    is the row range of subject ``i``. ``labels`` holds the external subject
    identifiers (defaults to 0..n-1).
    """

    x: np.ndarray
    offsets: np.ndarray
    y: np.ndarray | None = None
    labels: tuple = ()
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise ValueError("covariates must be a 2-d array")
        offsets = np.asarray(self.offsets, dtype=np.int64)
        if offsets.ndim != 1 or offsets[0] != 0 or offsets[-1] != x.shape[0] \
                or np.any(np.diff(offsets) < 0):
            raise ValueError("offsets must run from 0 to the row count")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "offsets", offsets)
        if self.y is not None:
            y = np.asarray(self.y, dtype=float).ravel()
            if y.shape[0] != x.shape[0]:
                raise ValueError("per-subject response count must equal covariate count")
            object.__setattr__(self, "y", y)
        n = offsets.shape[0] - 1
        labels = tuple(self.labels) if len(self.labels) else tuple(range(n))
        if len(labels) != n:
            raise ValueError("one label per subject required")
        object.__setattr__(self, "labels", labels)
        cols = tuple(self.columns) if self.columns else tuple(f"x_{l + 1}" for l in range(x.shape[1]))
        if len(cols) != x.shape[1]:
            raise ValueError("one column name per covariate required")
        object.__setattr__(self, "columns", cols)

    @classmethod
    def from_subjects(cls, xs: Sequence[np.ndarray], ys: Sequence[np.ndarray] | None = None,
                      labels: Sequence = (), columns: Sequence[str] = ()) -> "RepeatedDataset":
        if len(xs) == 0:
            raise ValueError("no subjects")
        xs = [np.atleast_2d(np.asarray(a, dtype=float)) for a in xs]
        sizes = [a.shape[0] for a in xs]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        y = None
        if ys is not None:
            if len(ys) != len(xs):
                raise ValueError("one response array per subject required")
            for a, b in zip(xs, ys):
                if len(b) != a.shape[0]:
                    raise ValueError("per-subject response count must equal covariate count")
            y = np.concatenate([np.asarray(b, dtype=float).ravel() for b in ys])
        return cls(np.concatenate(xs, axis=0), offsets, y, tuple(labels), tuple(columns))

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n_subjects(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def n_obs(self) -> int:
        return self.x.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def has_responses(self) -> bool:
        return self.y is not None

    def subject_index(self) -> np.ndarray:
        """Subject position of every row."""
        return np.repeat(np.arange(self.n_subjects), self.sizes)

    def subject(self, i: int) -> tuple[np.ndarray, np.ndarray | None]:
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return self.x[sl], None if self.y is None else self.y[sl]

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
        for i in range(self.n_subjects):
            yield self.subject(i)

    def subset(self, subjects: Sequence[int]) -> "RepeatedDataset":
        subjects = np.asarray(subjects, dtype=np.int64)
        if subjects.size == 0:
            raise ValueError("empty subject subset")
        rows = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in subjects])
        sizes = self.sizes[subjects]
        return RepeatedDataset(self.x[rows], np.concatenate([[0], np.cumsum(sizes)]),
                               None if self.y is None else self.y[rows],
                               tuple(self.labels[i] for i in subjects), self.columns)

    def with_responses(self, y: np.ndarray | None) -> "RepeatedDataset":
        return RepeatedDataset(self.x, self.offsets, y, self.labels, self.columns)

    def in_unit_cube(self) -> bool:
        return bool(np.all((self.x >= 0.0) & (self.x <= 1.0)))

    def require_unit_cube(self) -> None:
        if not self.in_unit_cube():
            raise ValueError("covariates must lie in [0, 1]^d")

    def require_responses(self) -> None:
        if self.y is None:
            raise ValueError("dataset has no responses")
