"""Frozen base weights, bias-free low-rank adapters and task vectors.

Weights follow the ``d_out x d_in`` convention: a layer maps an input row
``x`` to ``x @ W.T``. Every value type copies its arrays to float64 and marks
them read-only, so instances can be shared freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError


def frozen_array(values, ndim: int | None = None, name: str = "array") -> np.ndarray:
    """Return a read-only float64 copy of ``values``, checking rank and finiteness."""
    arr = np.array(values, dtype=np.float64, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, order=True)
class LayerId:
    index: int
    name: str = ""

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"layer index must be non-negative, got {self.index}")
        if not self.name:
            object.__setattr__(self, "name", f"layer{self.index}")

    def to_json(self) -> dict:
        return {"index": self.index, "name": self.name}

    @classmethod
    def from_json(cls, obj: dict) -> "LayerId":
        return cls(int(obj["index"]), str(obj["name"]))


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    values: np.ndarray

    def __post_init__(self):
        arr = frozen_array(self.values, ndim=2, name="weight matrix")
        if arr.size == 0:
            raise ShapeError("weight matrix must be non-empty")
        object.__setattr__(self, "values", arr)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, WeightMatrix):
            return NotImplemented
        return np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class LowRankAdapter:
    """``delta = up @ down`` with ``down`` of shape ``r x d_in`` and ``up`` of ``d_out x r``.

    There is deliberately no bias term: the update must stay linear so task
    vectors add to the frozen weights.
    """

    layer: LayerId
    down: np.ndarray
    up: np.ndarray

    def __post_init__(self):
        down = frozen_array(self.down, ndim=2, name="down projection")
        up = frozen_array(self.up, ndim=2, name="up projection")
        if up.shape[1] != down.shape[0]:
            raise ShapeError(
                f"up {up.shape} and down {down.shape} disagree on the adapter rank"
            )
        if down.shape[0] > min(down.shape[1], up.shape[0]):
            raise ShapeError(
                f"rank {down.shape[0]} exceeds min(d_in, d_out) = "
                f"{min(down.shape[1], up.shape[0])}"
            )
        object.__setattr__(self, "down", down)
        object.__setattr__(self, "up", up)

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.up.shape[0], self.down.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LowRankAdapter):
            return NotImplemented
        return (
            self.layer == other.layer
            and np.array_equal(self.down, other.down)
            and np.array_equal(self.up, other.up)
        )


@dataclass(frozen=True, eq=False)
class TaskVector:
    layer: LayerId
    delta: np.ndarray

    def __post_init__(self):
        delta = frozen_array(self.delta, ndim=2, name="task vector")
        if delta.size == 0:
            raise ShapeError("task vector must be non-empty")
        object.__setattr__(self, "delta", delta)

    @property
    def shape(self) -> tuple[int, int]:
        return self.delta.shape

    @classmethod
    def zeros(cls, layer: LayerId, d_out: int, d_in: int) -> "TaskVector":
        return cls(layer, np.zeros((d_out, d_in)))

    def __eq__(self, other):
        if not isinstance(other, TaskVector):
            return NotImplemented
        return self.layer == other.layer and np.array_equal(self.delta, other.delta)


def materialize_task_vector(adapter: LowRankAdapter) -> TaskVector:
    return TaskVector(adapter.layer, adapter.up @ adapter.down)


def diff_weights(fine_tuned: WeightMatrix, base: WeightMatrix, layer: LayerId | None = None) -> TaskVector:
    """Task vector ``fine_tuned - base``."""
    if fine_tuned.shape != base.shape:
        raise ShapeError(f"fine-tuned {fine_tuned.shape} vs base {base.shape}")
    return TaskVector(layer or LayerId(0), fine_tuned.values - base.values)


def assemble_final_weights(base: WeightMatrix, merged: TaskVector, lam: float) -> WeightMatrix:
    """``base + lam * merged``; the scale is applied here and nowhere else."""
    if base.shape != merged.shape:
        raise ShapeError(f"base {base.shape} vs task vector {merged.shape}")
    if not math.isfinite(lam):
        raise NumericalError(f"scaling factor must be finite, got {lam}")
    return WeightMatrix(base.values + lam * merged.delta)
