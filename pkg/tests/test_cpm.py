import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rlsmerge.cpm import (
    Projector,
    ProjectorRegistry,
    Prototype,
    compute_prototype,
    merged_projection,
    route,
    routing_weights,
    similarity,
)
from rlsmerge.errors import ShapeError, ZeroNormError


def linear(task, rng, d_in=4, d_out=3):
    return Projector(task, ((rng.standard_normal((d_out, d_in)), rng.standard_normal(d_out)),), "identity")


def registry(rng, n, d=4):
    reg = ProjectorRegistry()
    for t in range(1, n + 1):
        reg = reg.append(Prototype(t, rng.standard_normal(d), 10), linear(t, rng, d))
    return reg


def test_prototype_means(rng):
    v = rng.standard_normal(5)
    assert np.array_equal(compute_prototype(1, [v]).mean, v)
    feats = rng.standard_normal((50, 6))
    p = compute_prototype(2, feats)
    assert np.allclose(p.mean, np.sum(feats, axis=0) / 50, atol=1e-12)
    assert p.sample_count == 50


def test_antipodal_prototype_flagged(caplog):
    with caplog.at_level(logging.WARNING):
        p = compute_prototype(1, [[1.0, 0.0], [-1.0, 0.0]])
    assert np.array_equal(p.mean, [0.0, 0.0]) and p.degenerate
    assert "near-zero" in caplog.text
    assert similarity([1.0, 0.0], p) == 0.0


def test_similarity_examples(rng):
    m = rng.standard_normal(7)
    assert abs(similarity(m, Prototype(1, m, 1)) - 1.0) < 1e-12
    assert abs(similarity([1.0, 0.0], Prototype(1, [0.0, 2.0], 1))) < 1e-12
    assert abs(similarity([3.0, 4.0], Prototype(1, [4.0, 3.0], 1)) - 0.96) < 1e-15


def test_similarity_errors():
    with pytest.raises(ZeroNormError):
        similarity([0.0, 0.0], Prototype(1, [1.0, 0.0], 1))
    with pytest.raises(ShapeError):
        similarity([1.0], Prototype(1, [1.0, 0.0], 1))


def test_routing_examples():
    assert np.allclose(routing_weights([0.3, 0.3, 0.3]), 1 / 3, atol=1e-15)
    w = routing_weights([1.0, 0.0], 0.1)
    assert np.allclose(w, [0.9999546, 4.54e-5], rtol=1e-4)
    assert np.array_equal(routing_weights([0.2]), [1.0])
    with pytest.raises(ValueError):
        routing_weights([1.0], 0.0)


def test_low_temperature_limit():
    w = routing_weights([0.5, 0.49, -0.2], 1e-4)
    assert w[0] > 0.999999


def test_zero_query_routes_uniformly(rng):
    reg = registry(rng, 3)
    assert np.allclose(route(reg, np.zeros(4)), 1 / 3)


def test_merged_projection_examples(rng):
    reg = registry(rng, 1)
    Z = rng.standard_normal((5, 4))
    assert np.array_equal(merged_projection(Z, reg, rng.standard_normal(4)), reg.projectors[0](Z))
    P = linear(1, rng)
    twin = ProjectorRegistry(((Prototype(1, [1, 0, 0, 0], 1), P), (Prototype(2, [0, 1, 0, 0], 1), Projector(2, P.layers, P.activation))))
    assert np.allclose(merged_projection(Z, twin, rng.standard_normal(4), weights=[0.2, 0.8]), P(Z), atol=1e-14)
    reg2 = registry(rng, 2)
    out = merged_projection(Z, reg2, None, weights=[0.3, 0.7])
    P1, P2 = reg2.projectors
    expected = 0.3 * (Z @ P1.layers[0][0].T + P1.layers[0][1]) + 0.7 * (Z @ P2.layers[0][0].T + P2.layers[0][1])
    assert np.allclose(out, expected, atol=1e-14)
    with pytest.raises(ShapeError):
        merged_projection(Z, reg2, None, weights=[1.0])


def test_mlp_projector(rng):
    W1, b1 = rng.standard_normal((6, 4)), rng.standard_normal(6)
    W2, b2 = rng.standard_normal((3, 6)), rng.standard_normal(3)
    P = Projector(1, ((W1, b1), (W2, b2)), "relu")
    Z = rng.standard_normal((2, 4))
    assert np.allclose(P(Z), np.maximum(Z @ W1.T + b1, 0) @ W2.T + b2)
    with pytest.raises(ShapeError):
        Projector(1, ((W1, b1), (W1, b1)))
    with pytest.raises(ValueError):
        Projector(1, ((W1, b1),), "swish")


def test_registry_validation(rng):
    with pytest.raises(ValueError):
        ProjectorRegistry(((Prototype(2, np.ones(4), 1), linear(2, rng)),))
    with pytest.raises(ShapeError):
        ProjectorRegistry(((Prototype(1, np.ones(3), 1), linear(1, rng)),))
    reg = registry(rng, 3)
    assert len(reg.prefix(2)) == 2


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=12), st.floats(1e-3, 10))
def test_weights_are_a_distribution(s, eta):
    w = routing_weights(s, eta)
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(w >= 0)
    assert w[int(np.argmax(s))] == w.max()


@given(st.integers(2, 8), st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_similarity_scale_invariant(d, c, seed):
    rng = np.random.default_rng(seed)
    q, m = rng.standard_normal(d), rng.standard_normal(d)
    p = Prototype(1, m, 1)
    assert abs(similarity(c * q, p) - similarity(q, p)) < 1e-12
    assert abs(similarity(q, Prototype(1, c * m, 1)) - similarity(q, p)) < 1e-12
