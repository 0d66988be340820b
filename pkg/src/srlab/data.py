"""Synthetic and CSV datasets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SyntheticRegression:
    n: int = 512
    d_in: int = 16
    d_out: int = 4
    noise_sd: float = 0.5


@dataclass(frozen=True)
class TwoBlobClassification:
    n: int = 512
    d_in: int = 16
    separation: float = 2.0


@dataclass(frozen=True)
class ExternalCsv:
    path: str
    n_targets: int = 1


Task = SyntheticRegression | TwoBlobClassification | ExternalCsv


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    teacher: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]


class CsvFormatError(ValueError):
    pass


def generate_dataset(task: Task, seed: int = 0) -> Dataset:
    """Deterministic dataset for ``task``.

    Regression draws ``x ~ N(0, I)``, a teacher with ``N(0, 1/d_in)``
    entries and ``y = x @ teacher + noise_sd * N(0, I)``. Two-blob data puts
    the classes at ``+-separation/2`` along a random unit direction, labels
    one-hot.
    """
    if isinstance(task, ExternalCsv):
        return load_csv(task.path, task.n_targets)
    rng = np.random.default_rng(seed)
    if isinstance(task, SyntheticRegression):
        x = rng.standard_normal((task.n, task.d_in))
        teacher = rng.standard_normal((task.d_in, task.d_out)) / np.sqrt(task.d_in)
        y = x @ teacher + task.noise_sd * rng.standard_normal((task.n, task.d_out))
        return Dataset(x, y, teacher)
    if isinstance(task, TwoBlobClassification):
        u = rng.standard_normal(task.d_in)
        u /= np.linalg.norm(u)
        labels = rng.integers(0, 2, size=task.n)
        x = rng.standard_normal((task.n, task.d_in)) + np.outer(2 * labels - 1, u) * task.separation / 2
        y = np.eye(2)[labels]
        return Dataset(x, y)
    raise TypeError(f"unknown task {task!r}")


def load_csv(path: str | Path, n_targets: int = 1) -> Dataset:
    """Numeric CSV; the last ``n_targets`` columns are targets. A non-numeric first row is a header."""
    rows: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if lineno == 1:
                    continue
                bad = next(k for k, c in enumerate(row) if not _is_float(c))
                raise CsvFormatError(f"{path}: row {lineno}, column {bad + 1}: not a number: {row[bad]!r}") from None
            if rows and len(vals) != len(rows[0]):
                raise CsvFormatError(f"{path}: row {lineno} has {len(vals)} columns, expected {len(rows[0])}")
            rows.append(vals)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    data = np.array(rows)
    if not 1 <= n_targets < data.shape[1]:
        raise CsvFormatError(f"{path}: cannot take {n_targets} target columns from {data.shape[1]}")
    return Dataset(data[:, :-n_targets], data[:, -n_targets:])


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False
