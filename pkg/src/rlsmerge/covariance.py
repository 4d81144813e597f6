"""Cumulative feature covariance ``H_t = sum_i X_i.T X_i`` and the RLS gain.

Only the sufficient statistic persists between tasks: no function here takes
or keeps a historical feature batch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adapters import LayerId, TaskVector, frozen_array
from .errors import ShapeError
from .numerics import SpectralDecomposition, check_gamma, solve_psd, symmetric_part, truncated_svd


@dataclass(frozen=True, eq=False)
class FeatureBatch:
    """Rows of ``samples`` are input feature vectors of one layer for one task."""

    layer: LayerId
    samples: np.ndarray

    def __post_init__(self):
        X = frozen_array(self.samples, ndim=2, name="feature batch")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ShapeError(f"feature batch must be non-empty, got shape {X.shape}")
        object.__setattr__(self, "samples", X)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def gram(self) -> np.ndarray:
        return self.samples.T @ self.samples

    def __eq__(self, other):
        if not isinstance(other, FeatureBatch):
            return NotImplemented
        return self.layer == other.layer and np.array_equal(self.samples, other.samples)


@dataclass(frozen=True, eq=False)
class CumulativeCovariance:
    """Full (``matrix``) or compressed (``spectral`` + ``gamma``) form of ``H_t``.

    ``momentum`` holds ``Q_t = sum_i X_i.T X_i tau_i`` (d_in x d_out) and is only
    tracked when a batch-solution cross-check is wanted.
    """

    layer: LayerId
    dim: int
    task_count: int = 0
    matrix: np.ndarray | None = None
    spectral: SpectralDecomposition | None = None
    gamma: float | None = None
    momentum: np.ndarray | None = None

    def __post_init__(self):
        if self.task_count < 0:
            raise ValueError("task_count must be non-negative")
        if (self.matrix is None) == (self.spectral is None):
            raise ValueError("exactly one of matrix / spectral must be given")
        if self.matrix is not None:
            M = frozen_array(self.matrix, ndim=2, name="covariance")
            if M.shape != (self.dim, self.dim):
                raise ShapeError(f"covariance shape {M.shape} != ({self.dim}, {self.dim})")
            object.__setattr__(self, "matrix", M)
        else:
            if self.gamma is None:
                raise ValueError("compressed covariance needs its gamma")
            check_gamma(self.gamma)
            if self.spectral.dim != self.dim:
                raise ShapeError(f"basis dim {self.spectral.dim} != {self.dim}")
        if self.momentum is not None:
            Q = frozen_array(self.momentum, ndim=2, name="momentum")
            if Q.shape[0] != self.dim:
                raise ShapeError(f"momentum has {Q.shape[0]} rows, expected {self.dim}")
            object.__setattr__(self, "momentum", Q)

    @classmethod
    def zeros(
        cls,
        layer: LayerId,
        dim: int,
        gamma: float | None = None,
        momentum_cols: int | None = None,
    ) -> "CumulativeCovariance":
        """``H_0 = 0``, compressed at ``gamma`` if given."""
        momentum = None if momentum_cols is None else np.zeros((dim, momentum_cols))
        if gamma is None:
            return cls(layer, dim, 0, matrix=np.zeros((dim, dim)), momentum=momentum)
        spectral = SpectralDecomposition(np.zeros((dim, 0)), np.zeros(0))
        return cls(layer, dim, 0, spectral=spectral, gamma=check_gamma(gamma), momentum=momentum)

    @property
    def compressed(self) -> bool:
        return self.spectral is not None

    def storage_floats(self) -> int:
        if self.compressed:
            return self.dim * self.spectral.rank + self.spectral.rank
        return self.dim * self.dim

    def storage_ratio(self) -> float:
        """Stored floats relative to a dense ``d x d`` matrix."""
        return self.storage_floats() / (self.dim * self.dim)

    def __eq__(self, other):
        if not isinstance(other, CumulativeCovariance):
            return NotImplemented

        def same(a, b):
            return (a is None and b is None) or (
                a is not None and b is not None and np.array_equal(a, b)
            )

        return (
            self.layer == other.layer
            and self.dim == other.dim
            and self.task_count == other.task_count
            and self.gamma == other.gamma
            and same(self.matrix, other.matrix)
            and self.spectral == other.spectral
            and same(self.momentum, other.momentum)
        )


@dataclass(frozen=True, eq=False)
class GainMatrix:
    layer: LayerId
    gain: np.ndarray


def reconstruct_covariance(cov: CumulativeCovariance) -> np.ndarray:
    if cov.compressed:
        return cov.spectral.reconstruct()
    return cov.matrix


def _check_batch(cov: CumulativeCovariance, batch: FeatureBatch):
    if batch.layer != cov.layer:
        raise ShapeError(f"batch for {batch.layer} folded into covariance of {cov.layer}")
    if batch.dim != cov.dim:
        raise ShapeError(f"batch width {batch.dim} != covariance dim {cov.dim}")


def update_covariance(
    prev: CumulativeCovariance,
    batch: FeatureBatch,
    tau: TaskVector | None = None,
) -> CumulativeCovariance:
    """Fold one task's features: ``H_t = H_{t-1} + X.T X``.

    A compressed covariance is reconstructed, updated and re-truncated at its
    stored gamma. ``tau`` (adapter orientation, d_out x d_in) is required only
    when the momentum statistic is tracked.
    """
    _check_batch(prev, batch)
    gram = batch.gram()
    momentum = None
    if prev.momentum is not None:
        if tau is None:
            raise ValueError("covariance tracks momentum; pass the task vector")
        if tau.shape[1] != prev.dim:
            raise ShapeError(f"task vector {tau.shape} does not match input width {prev.dim}")
        momentum = prev.momentum + gram @ tau.delta.T
    if prev.compressed:
        H = reconstruct_covariance(prev) + gram
        spectral = truncated_svd(H, prev.gamma)
        return replace(prev, task_count=prev.task_count + 1, spectral=spectral, momentum=momentum)
    H = symmetric_part(prev.matrix + gram, "covariance")
    return replace(prev, task_count=prev.task_count + 1, matrix=H, momentum=momentum)


def compress_covariance(cov: CumulativeCovariance, gamma: float) -> CumulativeCovariance:
    gamma = check_gamma(gamma)
    if cov.compressed:
        raise ValueError("covariance is already compressed")
    spectral = truncated_svd(cov.matrix, gamma)
    return replace(cov, matrix=None, spectral=spectral, gamma=gamma)


def compute_gain(cov_t: CumulativeCovariance, batch_t: FeatureBatch) -> GainMatrix:
    """``S_t = H_t^+ X_t.T X_t``; ``cov_t`` must already contain ``batch_t``."""
    _check_batch(cov_t, batch_t)
    if cov_t.task_count == 0:
        raise ValueError("gain needs the covariance after folding the current batch")
    return GainMatrix(cov_t.layer, solve_psd(reconstruct_covariance(cov_t), batch_t.gram()))
