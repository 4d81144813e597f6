"""Continual-learning metrics over a lower-triangular accuracy matrix.

``A[i, j]`` is the accuracy (percent) on task ``j`` after learning task
``i``, 1-indexed with ``j <= i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence


@dataclass(frozen=True)
class AccuracyMatrix:
    n: int
    entries: Mapping[tuple[int, int], float]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("accuracy matrix needs at least one task")
        entries = {}
        for (i, j), value in self.entries.items():
            if not (1 <= j <= i <= self.n):
                raise ValueError(f"entry ({i}, {j}) outside the lower triangle of n={self.n}")
            value = float(value)
            if not (0.0 <= value <= 100.0) or math.isnan(value):
                raise ValueError(f"accuracy ({i}, {j}) = {value} outside [0, 100]")
            entries[(i, j)] = value
        missing = [(i, j) for i in range(1, self.n + 1) for j in range(1, i + 1) if (i, j) not in entries]
        if missing:
            raise ValueError(f"accuracy matrix incomplete; missing {missing[:5]}")
        object.__setattr__(self, "entries", entries)

    def __getitem__(self, key: tuple[int, int]) -> float:
        return self.entries[key]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        """Row ``i`` (0-based) lists accuracies on tasks ``1..i+1``."""
        entries = {}
        for i, row in enumerate(rows, start=1):
            if len(row) != i:
                raise ValueError(f"row {i} has {len(row)} entries, expected {i}")
            for j, value in enumerate(row, start=1):
                entries[(i, j)] = value
        return cls(len(rows), entries)

    def rows(self) -> list[list[float]]:
        return [[self.entries[(i, j)] for j in range(1, i + 1)] for i in range(1, self.n + 1)]

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "entries": {f"{i},{j}": v for (i, j), v in sorted(self.entries.items())},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "AccuracyMatrix":
        entries = {}
        for key, value in obj["entries"].items():
            i, j = (int(part) for part in key.split(","))
            entries[(i, j)] = value
        return cls(int(obj["n"]), entries)


@dataclass(frozen=True)
class Metrics:
    faa: float
    caa: float
    ffm: float | None

    def to_json(self) -> dict:
        return {"FAA": self.faa, "CAA": self.caa, "FFM": self.ffm}


def compute_metrics(acc: AccuracyMatrix) -> Metrics:
    """FAA = AA_n, CAA = mean of AA_i, FFM = mean over j < n of (A_jj - A_nj).

    FFM is ``None`` for a single task.
    """
    n = acc.n
    row_means = [sum(acc[(i, j)] for j in range(1, i + 1)) / i for i in range(1, n + 1)]
    faa = row_means[-1]
    caa = sum(row_means) / n
    ffm = None
    if n >= 2:
        ffm = sum(acc[(j, j)] - acc[(n, j)] for j in range(1, n)) / (n - 1)
    return Metrics(faa, caa, ffm)
