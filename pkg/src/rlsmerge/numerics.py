"""Regularised PSD solves and energy-truncated spectral decompositions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import frozen_array
from .errors import NumericalError, ShapeError

# eigenvalues below this fraction of the largest are treated as exact zeros
RANK_CUTOFF = 1e-12
SYMMETRY_TOL = 1e-8
PSD_TOL = 1e-10
RIDGE_CONDITION = 1e12
RIDGE_SCALE = 1e-10


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """``M ~= basis @ diag(energies) @ basis.T`` with orthonormal ``basis`` (d x r)."""

    basis: np.ndarray
    energies: np.ndarray

    def __post_init__(self):
        basis = frozen_array(self.basis, ndim=2, name="basis")
        energies = frozen_array(self.energies, ndim=1, name="energies")
        if basis.shape[1] != energies.shape[0]:
            raise ShapeError(f"basis {basis.shape} vs {energies.shape[0]} energies")
        if np.any(energies < 0) or np.any(np.diff(energies) > 0):
            raise NumericalError("energies must be nonnegative and nonincreasing")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "energies", energies)

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def reconstruct(self) -> np.ndarray:
        return (self.basis * self.energies) @ self.basis.T

    def __eq__(self, other):
        if not isinstance(other, SpectralDecomposition):
            return NotImplemented
        return np.array_equal(self.basis, other.basis) and np.array_equal(
            self.energies, other.energies
        )


def symmetric_part(H, name: str = "matrix") -> np.ndarray:
    """Validate near-symmetry and return ``(H + H.T) / 2``."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise NumericalError(f"{name} contains non-finite entries")
    scale = np.linalg.norm(H)
    if np.linalg.norm(H - H.T) > SYMMETRY_TOL * scale:
        raise NumericalError(f"{name} is not symmetric")
    return (H + H.T) / 2


def psd_eigh(H, name: str = "matrix") -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric PSD matrix, descending, with round-off negatives clamped."""
    S = symmetric_part(H, name)
    w, V = np.linalg.eigh(S)
    trace = float(np.trace(S))
    if w.size and w[0] < -PSD_TOL * max(abs(trace), np.finfo(float).tiny):
        raise NumericalError(f"{name} is not positive semidefinite (min eigenvalue {w[0]:.3e})")
    w = np.clip(w[::-1], 0.0, None)
    return w, V[:, ::-1]


def solve_psd(H, rhs, ridge: bool = False) -> np.ndarray:
    """Minimum-norm least-squares solution of ``H @ X = rhs`` for symmetric PSD ``H``.

    Eigenvalues below ``RANK_CUTOFF * max`` are dropped, which gives
    pseudo-inverse semantics on singular input. With ``ridge=True`` an
    ill-conditioned ``H`` (condition number above ``RIDGE_CONDITION``) is
    instead shifted by ``RIDGE_SCALE * trace(H) / d`` and solved fully.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    vector = rhs.ndim == 1
    if vector:
        rhs = rhs[:, None]
    w, V = psd_eigh(H, "H")
    if rhs.shape[0] != V.shape[0]:
        raise ShapeError(f"H is {V.shape[0]}x{V.shape[0]} but rhs has {rhs.shape[0]} rows")
    if not np.all(np.isfinite(rhs)):
        raise NumericalError("rhs contains non-finite entries")
    d = V.shape[0]
    if d == 0 or w[0] == 0.0:
        out = np.zeros_like(rhs)
        return out[:, 0] if vector else out
    if ridge and w[-1] < w[0] / RIDGE_CONDITION:
        w = w + RIDGE_SCALE * w.sum() / d
        inv = 1.0 / w
    else:
        keep = w > RANK_CUTOFF * w[0]
        inv = np.zeros_like(w)
        inv[keep] = 1.0 / w[keep]
    out = V @ (inv[:, None] * (V.T @ rhs))
    return out[:, 0] if vector else out


def energy_rank(energies: np.ndarray, gamma: float) -> int:
    """Smallest r with ``sum(e[:r]**2) / sum(e**2) >= gamma``; 0 for an all-zero spectrum."""
    sq = np.cumsum(np.asarray(energies, dtype=np.float64) ** 2)
    if sq.size == 0 or sq[-1] == 0.0:
        return 0
    ratio = sq / sq[-1]
    return int(np.searchsorted(ratio, gamma, side="left")) + 1


def check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"energy threshold gamma must lie in (0, 1], got {gamma}")
    return gamma


def truncated_svd(M, gamma: float) -> SpectralDecomposition:
    """Minimal-rank truncation of a symmetric PSD matrix keeping a ``gamma`` share of squared energy.

    For PSD input the singular values are the eigenvalues and the left and
    right singular bases coincide, so a single basis is returned.
    """
    gamma = check_gamma(gamma)
    w, V = psd_eigh(M, "M")
    if w.size:
        w = np.where(w > RANK_CUTOFF * w[0], w, 0.0)
    r = energy_rank(w, gamma)
    return SpectralDecomposition(V[:, :r], w[:r])
