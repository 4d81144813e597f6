"""Recursive least-squares consolidation of per-layer task vectors.

Orientation: task vectors arrive in adapter orientation (``d_out x d_in``)
while the merging algebra is written with features on the left,
``f(tau) = X @ tau`` with ``tau`` of shape ``d_in x d_out``. The transposes
between the two happen only in this module (``_alg`` / ``_adapter``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .adapters import LayerId, TaskVector
from .covariance import (
    CumulativeCovariance,
    FeatureBatch,
    compute_gain,
    reconstruct_covariance,
    update_covariance,
)
from .errors import ShapeError
from .numerics import RANK_CUTOFF, solve_psd


def _alg(tau: TaskVector) -> np.ndarray:
    return tau.delta.T


def _adapter(layer: LayerId, tau_alg: np.ndarray) -> TaskVector:
    return TaskVector(layer, tau_alg.T)


@dataclass(frozen=True)
class LayerState:
    tau_star: TaskVector
    cov: CumulativeCovariance


@dataclass(frozen=True)
class MergedState:
    layers: Mapping[LayerId, LayerState] = field(default_factory=dict)

    @classmethod
    def initial(
        cls,
        shapes: Mapping[LayerId, tuple[int, int]],
        gamma: float | None = None,
        track_momentum: bool = False,
    ) -> "MergedState":
        """``tau_0* = 0`` and ``H_0 = 0`` for each layer; ``shapes`` maps layer -> (d_out, d_in)."""
        layers = {}
        for layer, (d_out, d_in) in sorted(shapes.items()):
            cov = CumulativeCovariance.zeros(
                layer, d_in, gamma=gamma, momentum_cols=d_out if track_momentum else None
            )
            layers[layer] = LayerState(TaskVector.zeros(layer, d_out, d_in), cov)
        return cls(layers)

    @property
    def tasks_merged(self) -> int:
        """Number of tasks folded into every layer."""
        if not self.layers:
            return 0
        return min(s.cov.task_count for s in self.layers.values())

    def tau_star(self, layer: LayerId) -> TaskVector:
        return self.layers[layer].tau_star

    def merged_vectors(self) -> dict[LayerId, TaskVector]:
        return {layer: s.tau_star for layer, s in self.layers.items()}


@dataclass(frozen=True)
class DriftReport:
    """``per_task[i][layer] = ||X_i (tau* - tau_i)||_F``."""

    per_task: list[dict[LayerId, float]]

    @property
    def task_totals(self) -> list[float]:
        return [float(sum(d.values())) for d in self.per_task]

    @property
    def total(self) -> float:
        return float(sum(self.task_totals))

    def to_json(self) -> dict:
        return {
            "per_task": [
                {layer.name: value for layer, value in sorted(d.items())} for d in self.per_task
            ],
            "task_totals": self.task_totals,
            "total": self.total,
        }


def recursive_merge_step(
    state: MergedState,
    layer: LayerId,
    batch: FeatureBatch,
    tau: TaskVector,
) -> MergedState:
    """Fold one task into one layer: ``tau* <- tau* + S_t (tau_t - tau*)``.

    Directions outside the span of all features seen so far keep their
    previous merged value.
    """
    if layer not in state.layers:
        raise KeyError(f"unknown layer {layer}")
    if batch.layer != layer or tau.layer != layer:
        raise ShapeError(f"batch/task vector layers ({batch.layer}, {tau.layer}) != {layer}")
    current = state.layers[layer]
    if tau.shape != current.tau_star.shape:
        raise ShapeError(f"task vector {tau.shape} vs merged {current.tau_star.shape}")
    if current.cov.task_count > state.tasks_merged:
        raise ValueError(f"{layer} already folded for task {state.tasks_merged + 1}")
    cov = update_covariance(current.cov, batch, tau)
    gain = compute_gain(cov, batch).gain
    prev = _alg(current.tau_star)
    merged = prev + gain @ (_alg(tau) - prev)
    layers = dict(state.layers)
    layers[layer] = LayerState(_adapter(layer, merged), cov)
    return MergedState(layers)


def merge_sequence(
    stream: Iterable[tuple[Mapping[LayerId, FeatureBatch], Mapping[LayerId, TaskVector]]],
    gamma: float | None = None,
    track_momentum: bool = False,
) -> MergedState:
    """Fold a whole task stream layer by layer; ``gamma`` selects compressed covariance."""
    state = MergedState()
    layer_set = None
    for t, (batches, taus) in enumerate(stream, start=1):
        if set(batches) != set(taus):
            raise ValueError(f"task {t}: feature and task-vector layers differ")
        if layer_set is None:
            layer_set = set(batches)
            shapes = {layer: taus[layer].shape for layer in layer_set}
            state = MergedState.initial(shapes, gamma=gamma, track_momentum=track_momentum)
        elif set(batches) != layer_set:
            raise ValueError(f"task {t}: layer set differs from task 1")
        for layer in sorted(layer_set):
            state = recursive_merge_step(state, layer, batches[layer], taus[layer])
    return state


def batch_merge_oracle(batches: Sequence[FeatureBatch], taus: Sequence[TaskVector]) -> TaskVector:
    """Joint least-squares optimum over all tasks at once.

    Solves the stacked system ``[X_1; ...; X_t] tau = [X_1 tau_1; ...]`` with a
    minimum-norm least-squares solver, which equals
    ``(sum X_i.T X_i)^+ sum X_i.T X_i tau_i`` without forming either sum.
    Needs every historical batch, so it serves as a reference only.
    """
    if len(batches) == 0 or len(batches) != len(taus):
        raise ValueError("need equally many (>= 1) feature batches and task vectors")
    layer = taus[0].layer
    shape = taus[0].shape
    for b, tau in zip(batches, taus):
        if tau.shape != shape or b.dim != shape[1]:
            raise ShapeError(f"inconsistent shapes: batch {b.samples.shape}, task vector {tau.shape}")
    A = np.vstack([b.samples for b in batches])
    rhs = np.vstack([b.samples @ _alg(tau) for b, tau in zip(batches, taus)])
    # sqrt because singular values of A are square roots of eigenvalues of A.T A
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=np.sqrt(RANK_CUTOFF))
    return _adapter(layer, sol)


def momentum_solution(cov: CumulativeCovariance) -> TaskVector:
    """``H_t^+ Q_t`` from tracked statistics; equals the batch optimum."""
    if cov.momentum is None:
        raise ValueError("covariance does not track momentum")
    return _adapter(cov.layer, solve_psd(reconstruct_covariance(cov), cov.momentum))


def drift_objective(batches: Sequence[FeatureBatch], taus: Sequence[TaskVector], merged: TaskVector) -> float:
    """``sum_i ||X_i (tau - tau_i)||_F^2``."""
    return float(
        sum(np.linalg.norm(b.samples @ (_alg(merged) - _alg(t))) ** 2 for b, t in zip(batches, taus))
    )


def feature_drift(batch: FeatureBatch, merged: TaskVector, original: TaskVector) -> float:
    if merged.shape != original.shape or batch.dim != merged.shape[1]:
        raise ShapeError(
            f"batch {batch.samples.shape}, merged {merged.shape}, original {original.shape}"
        )
    return float(np.linalg.norm(batch.samples @ (_alg(merged) - _alg(original))))


def drift_report(
    merged: Mapping[LayerId, TaskVector],
    batches: Sequence[Mapping[LayerId, FeatureBatch]],
    taus: Sequence[Mapping[LayerId, TaskVector]],
) -> DriftReport:
    per_task = []
    for task_batches, task_taus in zip(batches, taus):
        per_task.append(
            {
                layer: feature_drift(task_batches[layer], merged[layer], task_taus[layer])
                for layer in sorted(task_taus)
            }
        )
    return DriftReport(per_task)


def naive_average(taus: Sequence[TaskVector]) -> TaskVector:
    """Plain arithmetic mean of task vectors (comparison baseline)."""
    if not taus:
        raise ValueError("nothing to average")
    return TaskVector(taus[0].layer, np.mean([t.delta for t in taus], axis=0))
