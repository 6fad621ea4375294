"""Tabular dataset container and its CSV format."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class Dataset:
    """A feature matrix with one numeric response.

    Parameters
    ----------
    features : (n, d) ndarray
    response : (n,) ndarray
    column_names : list of str, optional
        Defaults to ``x1, ..., xd``.
    """

    features: np.ndarray
    response: np.ndarray
    column_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.response = np.ascontiguousarray(self.response, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise ValueError(f"dataset must have n >= 1 and d >= 1, got {n}x{d}")
        if self.response.shape != (n,):
            raise ValueError(f"response must have shape ({n},), got {self.response.shape}")
        if not (np.isfinite(self.features).all() and np.isfinite(self.response).all()):
            raise ValueError("dataset contains non-finite values")
        if not self.column_names:
            self.column_names = [f"x{j + 1}" for j in range(d)]
        if len(self.column_names) != d:
            raise ValueError("column_names must have one label per feature")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, rows: Sequence[int] | np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.features[rows], self.response[rows], list(self.column_names))

    def to_csv(self, path: str | Path) -> None:
        """Write ``x1,...,xd,y`` with shortest round-trip float formatting."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([*self.column_names, "y"])
            for row, y in zip(self.features.tolist(), self.response.tolist()):
                writer.writerow([*map(repr, row), repr(y)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if len(header) < 2 or header[-1] != "y":
                raise ValueError(f"{path}: last column must be 'y'")
            table = np.array([[float(v) for v in row] for row in reader if row], dtype=np.float64)
        if table.size == 0:
            raise ValueError(f"{path}: no data rows")
        return cls(table[:, :-1], table[:, -1], header[:-1])
