"""Prototype routing across task-specific projectors.

Each task contributes a prototype (mean global visual embedding) and a small
MLP projector. A query is routed by cosine similarity to the prototypes,
turned into weights with a temperature softmax, and the projector *outputs*
are blended with those weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapters import frozen_array
from .errors import ShapeError, ZeroNormError

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.1
NORM_EPS = 1e-12
DEGENERATE_SCALE = 1e-9

ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "gelu": lambda x: 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3))),
    "identity": lambda x: x,
}


@dataclass(frozen=True, eq=False)
class Prototype:
    task: int
    mean: np.ndarray
    sample_count: int

    def __post_init__(self):
        object.__setattr__(self, "mean", frozen_array(self.mean, ndim=1, name="prototype"))
        if self.sample_count < 1:
            raise ValueError("prototype needs at least one sample")

    @property
    def degenerate(self) -> bool:
        """Mean too close to zero for its direction to be meaningful."""
        return float(np.linalg.norm(self.mean)) < DEGENERATE_SCALE * self.mean.size

    def __eq__(self, other):
        if not isinstance(other, Prototype):
            return NotImplemented
        return (
            self.task == other.task
            and self.sample_count == other.sample_count
            and np.array_equal(self.mean, other.mean)
        )


@dataclass(frozen=True, eq=False)
class Projector:
    """MLP ``d_v -> d_l``; each layer is ``h @ W.T + b`` with ``activation`` between layers."""

    task: int
    layers: tuple
    activation: str = "gelu"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("projector needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        frozen = []
        width = None
        for W, b in self.layers:
            W = frozen_array(W, ndim=2, name="projector weight")
            b = frozen_array(b, ndim=1, name="projector bias")
            if b.shape[0] != W.shape[0]:
                raise ShapeError(f"bias {b.shape} does not match weight {W.shape}")
            if width is not None and W.shape[1] != width:
                raise ShapeError(f"layer expects width {W.shape[1]}, previous layer gives {width}")
            width = W.shape[0]
            frozen.append((W, b))
        object.__setattr__(self, "layers", tuple(frozen))

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def __call__(self, tokens) -> np.ndarray:
        h = np.asarray(tokens, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ShapeError(f"tokens {h.shape} do not match projector input {self.input_dim}")
        act = ACTIVATIONS[self.activation]
        for i, (W, b) in enumerate(self.layers):
            h = h @ W.T + b
            if i < len(self.layers) - 1:
                h = act(h)
        return h

    def __eq__(self, other):
        if not isinstance(other, Projector):
            return NotImplemented
        return (
            self.task == other.task
            and self.activation == other.activation
            and len(self.layers) == len(other.layers)
            and all(
                np.array_equal(W1, W2) and np.array_equal(b1, b2)
                for (W1, b1), (W2, b2) in zip(self.layers, other.layers)
            )
        )


@dataclass(frozen=True)
class ProjectorRegistry:
    entries: tuple = field(default_factory=tuple)
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        entries = tuple(self.entries)
        for k, (proto, proj) in enumerate(entries, start=1):
            if proto.task != k or proj.task != k:
                raise ValueError(f"entry {k} holds task ({proto.task}, {proj.task})")
        if entries:
            d_v = entries[0][0].mean.size
            for proto, proj in entries:
                if proto.mean.size != d_v or proj.input_dim != d_v:
                    raise ShapeError("registry entries disagree on the visual width")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def prototypes(self) -> list[Prototype]:
        return [p for p, _ in self.entries]

    @property
    def projectors(self) -> list[Projector]:
        return [q for _, q in self.entries]

    def append(self, proto: Prototype, projector: Projector) -> "ProjectorRegistry":
        return ProjectorRegistry(self.entries + ((proto, projector),), self.temperature)

    def prefix(self, t: int) -> "ProjectorRegistry":
        """Registry as it stood after task ``t``."""
        return ProjectorRegistry(self.entries[:t], self.temperature)


def compute_prototype(task: int, features: Sequence) -> Prototype:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ShapeError(f"need a non-empty list of equal-length vectors, got shape {feats.shape}")
    proto = Prototype(task, feats.mean(axis=0), feats.shape[0])
    if proto.degenerate:
        log.warning("prototype for task %d has near-zero norm; it will never win routing", task)
    return proto


def similarity(query, proto: Prototype) -> float:
    """Cosine similarity; a degenerate prototype scores 0."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != proto.mean.shape:
        raise ShapeError(f"query {q.shape} vs prototype {proto.mean.shape}")
    qn = float(np.linalg.norm(q))
    if qn <= NORM_EPS:
        raise ZeroNormError("query feature has zero norm")
    pn = float(np.linalg.norm(proto.mean))
    if proto.degenerate or pn <= NORM_EPS:
        return 0.0
    return float(np.clip(q @ proto.mean / (qn * pn), -1.0, 1.0))


def routing_weights(similarities, eta: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    s = np.asarray(similarities, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("need a non-empty similarity vector")
    if not eta > 0:
        raise ValueError(f"temperature must be positive, got {eta}")
    z = np.exp((s - s.max()) / eta)
    return z / z.sum()


def route(registry: ProjectorRegistry, query) -> np.ndarray:
    """Routing weights for a query; uniform if the query has zero norm."""
    if len(registry) == 0:
        raise ValueError("registry is empty")
    try:
        s = [similarity(query, p) for p in registry.prototypes]
    except ZeroNormError:
        log.warning("zero-norm query; falling back to uniform routing weights")
        return np.full(len(registry), 1.0 / len(registry))
    return routing_weights(s, registry.temperature)


def merged_projection(spatial, registry: ProjectorRegistry, query, weights=None) -> np.ndarray:
    """``sum_i w_i P_i(spatial)``; ``weights`` overrides the routed ones when given."""
    w = route(registry, query) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(registry),):
        raise ShapeError(f"{w.shape[0]} weights for {len(registry)} projectors")
    out = None
    for wi, proj in zip(w, registry.projectors):
        term = wi * proj(spatial)
        out = term if out is None else out + term
    return out
