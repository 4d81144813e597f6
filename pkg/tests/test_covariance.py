import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rlsmerge.adapters import LayerId, TaskVector
from rlsmerge.covariance import (
    CumulativeCovariance,
    FeatureBatch,
    compress_covariance,
    compute_gain,
    reconstruct_covariance,
    update_covariance,
)
from rlsmerge.errors import ShapeError

from conftest import rel


def test_identity_features_accumulate(layer):
    H0 = CumulativeCovariance.zeros(layer, 2)
    H1 = update_covariance(H0, FeatureBatch(layer, np.eye(2)))
    assert np.array_equal(H1.matrix, np.eye(2)) and H1.task_count == 1
    H2 = update_covariance(H1, FeatureBatch(layer, np.eye(2)))
    assert np.array_equal(H2.matrix, 2 * np.eye(2)) and H2.task_count == 2


def test_sequential_equals_joint(rng, layer):
    batches = [rng.standard_normal((8, 4)) for _ in range(3)]
    cov = CumulativeCovariance.zeros(layer, 4)
    for X in batches:
        cov = update_covariance(cov, FeatureBatch(layer, X))
    assert rel(cov.matrix, sum(X.T @ X for X in batches)) < 1e-12


def test_compress_examples(rng, layer):
    X = rng.standard_normal((10, 5))
    cov = CumulativeCovariance(layer, 5, 1, matrix=X.T @ X)
    assert rel(reconstruct_covariance(compress_covariance(cov, 1.0)), cov.matrix) < 1e-10
    d = CumulativeCovariance(layer, 2, 1, matrix=np.diag([9.0, 1.0]))
    c = compress_covariance(d, 0.9)
    assert c.spectral.rank == 1
    assert np.allclose(reconstruct_covariance(c), np.diag([9.0, 0.0]), atol=1e-14)
    assert compress_covariance(d, 0.999).spectral.rank == 2
    with pytest.raises(ValueError):
        compress_covariance(c, 0.9)


def test_reconstruct_full_is_identity(rng, layer):
    X = rng.standard_normal((6, 3))
    cov = CumulativeCovariance(layer, 3, 1, matrix=X.T @ X)
    assert reconstruct_covariance(cov) is cov.matrix


def test_rank_one_compressed_exact(rng, layer):
    v = rng.standard_normal((1, 6))
    cov = CumulativeCovariance(layer, 6, 1, matrix=v.T @ v)
    c = compress_covariance(cov, 0.5)
    assert c.spectral.rank == 1
    assert rel(reconstruct_covariance(c), cov.matrix) < 1e-12


def test_storage(layer):
    cov = CumulativeCovariance.zeros(layer, 16, gamma=0.9)
    assert cov.storage_floats() == 0
    full = CumulativeCovariance.zeros(layer, 16)
    assert full.storage_ratio() == 1.0


def test_gain_examples(rng, layer):
    X = rng.standard_normal((12, 5))
    b = FeatureBatch(layer, X)
    cov1 = update_covariance(CumulativeCovariance.zeros(layer, 5), b)
    assert np.allclose(compute_gain(cov1, b).gain, np.eye(5), atol=1e-10)
    cov2 = update_covariance(cov1, b)
    assert np.allclose(compute_gain(cov2, b).gain, 0.5 * np.eye(5), atol=1e-10)


def test_gain_residual(rng, layer):
    cov = CumulativeCovariance.zeros(layer, 6)
    for _ in range(3):
        b = FeatureBatch(layer, rng.standard_normal((9, 6)))
        cov = update_covariance(cov, b)
    S = compute_gain(cov, b).gain
    assert np.linalg.norm(cov.matrix @ S - b.gram()) / np.linalg.norm(b.gram()) < 1e-10


def test_gain_requires_folded_batch(layer):
    with pytest.raises(ValueError):
        compute_gain(CumulativeCovariance.zeros(layer, 2), FeatureBatch(layer, np.eye(2)))


def test_mismatches(layer):
    cov = CumulativeCovariance.zeros(layer, 3)
    with pytest.raises(ShapeError):
        update_covariance(cov, FeatureBatch(layer, np.ones((2, 4))))
    with pytest.raises(ShapeError):
        update_covariance(cov, FeatureBatch(LayerId(9), np.ones((2, 3))))
    with pytest.raises(ValueError):
        CumulativeCovariance(layer, 2)
    with pytest.raises(ValueError):
        update_covariance(CumulativeCovariance.zeros(layer, 3, momentum_cols=2), FeatureBatch(layer, np.ones((2, 3))))


def test_momentum_tracks_weighted_sum(rng, layer):
    cov = CumulativeCovariance.zeros(layer, 4, momentum_cols=3)
    Q = np.zeros((4, 3))
    for _ in range(2):
        X = rng.standard_normal((5, 4))
        tau = TaskVector(layer, rng.standard_normal((3, 4)))
        cov = update_covariance(cov, FeatureBatch(layer, X), tau)
        Q += X.T @ X @ tau.delta.T
    assert rel(cov.momentum, Q) < 1e-12


@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_covariance_additive_psd(d, n, seed):
    rng = np.random.default_rng(seed)
    layer = LayerId(0)
    cov = CumulativeCovariance.zeros(layer, d)
    for _ in range(n):
        cov = update_covariance(cov, FeatureBatch(layer, rng.standard_normal((rng.integers(1, 6), d))))
    assert np.array_equal(cov.matrix, cov.matrix.T)
    assert np.linalg.eigvalsh(cov.matrix).min() >= -1e-10 * max(1.0, np.trace(cov.matrix))
    assert cov.task_count == n


@given(st.integers(2, 10), st.floats(0.5, 1.0), st.integers(0, 2**32 - 1))
def test_compressed_update_bounded(d, gamma, seed):
    rng = np.random.default_rng(seed)
    layer = LayerId(0)
    cov = CumulativeCovariance.zeros(layer, d, gamma=gamma)
    for _ in range(3):
        cov = update_covariance(cov, FeatureBatch(layer, rng.standard_normal((d, d))))
        assert cov.spectral.rank <= d
        assert cov.storage_floats() == d * cov.spectral.rank + cov.spectral.rank
