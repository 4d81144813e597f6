"""Synthetic continual task streams and an end-to-end merging harness.

Each layer's input space is split by a random orthogonal basis into a block
shared by every task and one private block per task. ``overlap`` is the
fraction of each task's feature subspace that is shared, i.e. the share of
unit cosines among the principal angles between two tasks: 0 gives mutually
orthogonal subspaces, 1 puts all tasks in the same subspace. Training features are built
as ``X_t = U_t diag(sigma_t) V_t.T`` with orthonormal ``U_t``, so the right
singular vectors of every batch are exactly the chosen basis columns. Each
basis direction has a per-layer feature strength; a task's singular value
along it is that strength times a per-task factor in
``[1 - spectrum_jitter, 1 + spectrum_jitter]``.

Two tracks are scored separately:

* reasoning: per-layer linear maps ``x -> x @ (W_pre + tau).T`` built from
  the fitted adapters and the strategy under test. This feeds the accuracy
  matrix.
* perception: task-specific linear projectors routed by visual prototypes.
  Every merging strategy uses prototype routing; ``oracle_task_id`` uses the
  true task's projector.

Accuracy on held-out data is ``100 * max(0, 1 - ||y_hat - y|| / ||y||)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

from .adapters import (
    LayerId,
    LowRankAdapter,
    TaskVector,
    WeightMatrix,
    assemble_final_weights,
    materialize_task_vector,
)
from .covariance import FeatureBatch, reconstruct_covariance
from .cpm import (
    DEFAULT_TEMPERATURE,
    Projector,
    ProjectorRegistry,
    compute_prototype,
    merged_projection,
    route,
)
from .errors import ShapeError
from .lpm import DriftReport, MergedState, drift_report, naive_average, recursive_merge_step
from .metrics import AccuracyMatrix, Metrics, compute_metrics
from .numerics import RANK_CUTOFF, check_gamma

STRATEGIES = ("many", "many_star", "naive_average", "final_task_only", "oracle_task_id")
MERGING_STRATEGIES = ("many", "many_star", "naive_average")
DEFAULT_GAMMA = 0.999


@dataclass(frozen=True)
class StreamConfig:
    task_count: int = 3
    dim: int = 64
    out_dim: int | None = None
    samples: int = 128
    eval_samples: int = 64
    rank: int = 16
    layer_count: int = 2
    overlap: float = 0.5
    proto_dim: int = 16
    proto_separation: float = 4.0
    cluster_sigma: float = 1.0
    proto_samples: int = 64
    proj_dim: int = 8
    tokens: int = 8
    eval_queries: int = 16
    noise: float = 0.0
    spectrum_jitter: float = 0.25
    base_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.out_dim is None:
            object.__setattr__(self, "out_dim", self.dim)
        for name in ("task_count", "dim", "out_dim", "samples", "eval_samples", "rank",
                     "layer_count", "proto_dim", "proto_samples", "proj_dim", "tokens",
                     "eval_queries"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap must lie in [0, 1], got {self.overlap}")
        for name in ("proto_separation", "noise", "base_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.spectrum_jitter < 1.0:
            raise ValueError("spectrum_jitter must lie in [0, 1)")
        if not self.cluster_sigma > 0:
            raise ValueError("cluster_sigma must be > 0")
        if self.overlap < 1.0:
            needed = self.task_count * math.ceil(round(self.dim * (1.0 - self.overlap), 9) / self.task_count)
            if needed > self.dim or self.private_dim < 1:
                raise ValueError(
                    f"{self.task_count} task subspaces with overlap {self.overlap} "
                    f"do not fit in dimension {self.dim}"
                )
        if self.rank > min(self.dim, self.out_dim):
            raise ValueError(f"rank {self.rank} exceeds min(dim, out_dim)")
        if self.samples < self.subspace_dim:
            raise ValueError(f"samples ({self.samples}) must be >= task subspace width ({self.subspace_dim})")
        if self.proto_dim < self.task_count:
            raise ValueError("proto_dim must be >= task_count for separable prototypes")

    @property
    def subspace_dim(self) -> int:
        """Width ``k`` of each task's feature subspace; shared + private blocks fill the space."""
        o, n = self.overlap, self.task_count
        k = int(math.floor(round(self.dim / (o + n * (1.0 - o)), 9)))
        # rounding the shared block can overshoot by a column; shrink until it fits
        while k > 0 and round(o * k) + n * (k - round(o * k)) > self.dim:
            k -= 1
        return k

    @property
    def shared_dim(self) -> int:
        return int(round(self.overlap * self.subspace_dim))

    @property
    def private_dim(self) -> int:
        return self.subspace_dim - self.shared_dim

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "StreamConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    index: int
    features: dict  # LayerId -> FeatureBatch (training inputs)
    targets: dict  # LayerId -> (n, d_out) targets for the update, x @ G.T + noise
    truth: dict  # LayerId -> TaskVector, the ideal update G
    bases: dict  # LayerId -> (d_in, k) orthonormal right-singular basis
    spectra: dict  # LayerId -> (k,) singular values, aligned with the columns of bases
    eval_features: dict  # LayerId -> (m, d_in)
    eval_targets: dict  # LayerId -> (m, d_out), outputs of W_pre + G
    global_features: np.ndarray  # (N_p, d_v) samples for the prototype
    proj_inputs: np.ndarray  # (N, d_v) spatial tokens for projector fitting
    proj_targets: np.ndarray  # (N, d_l)
    query_globals: np.ndarray  # (q, d_v)
    query_tokens: np.ndarray  # (q, tokens, d_v)
    query_targets: np.ndarray  # (q, tokens, d_l)


@dataclass(frozen=True, eq=False)
class SyntheticStream:
    config: StreamConfig
    layers: tuple
    base: dict  # LayerId -> WeightMatrix
    tasks: tuple

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[SyntheticTask]:
        return iter(self.tasks)

    def __getitem__(self, i) -> SyntheticTask:
        return self.tasks[i]


def _orthogonal(rng: np.random.Generator, n: int, k: int | None = None) -> np.ndarray:
    """Haar-random ``n x k`` matrix with orthonormal columns."""
    k = n if k is None else k
    Q, R = np.linalg.qr(rng.standard_normal((n, k)))
    return Q * np.sign(np.diag(R))


def generate_stream(config: StreamConfig) -> SyntheticStream:
    cfg = config
    root = np.random.SeedSequence(cfg.seed)
    layer_seq, proto_seq = root.spawn(2)
    layers = tuple(LayerId(l, f"layer{l}") for l in range(cfg.layer_count))
    s, p = cfg.shared_dim, cfg.private_dim

    base = {}
    per_layer = []
    for layer, seq in zip(layers, layer_seq.spawn(cfg.layer_count)):
        rng = np.random.default_rng(seq)
        Q = _orthogonal(rng, cfg.dim)
        strength = rng.uniform(0.5, 2.0, size=cfg.dim)
        base[layer] = WeightMatrix(cfg.base_scale * rng.standard_normal((cfg.out_dim, cfg.dim)) / math.sqrt(cfg.dim))
        per_layer.append((layer, rng, Q, strength))

    prng = np.random.default_rng(proto_seq)
    directions = _orthogonal(prng, cfg.proto_dim, cfg.task_count)
    sigma = cfg.cluster_sigma

    tasks = []
    for t in range(cfg.task_count):
        features, targets, truth, bases, spectra, eval_x, eval_y = {}, {}, {}, {}, {}, {}, {}
        for layer, rng, Q, strength in per_layer:
            cols = np.r_[0:s, s + t * p : s + (t + 1) * p]
            V = Q[:, cols]
            k = V.shape[1]
            jitter = cfg.spectrum_jitter
            sv = strength[cols] * rng.uniform(1.0 - jitter, 1.0 + jitter, size=k)
            U = _orthogonal(rng, cfg.samples, k)
            X = (U * sv) @ V.T
            B = rng.standard_normal((cfg.out_dim, cfg.rank))
            A = rng.standard_normal((cfg.rank, cfg.dim))
            G = B @ A / math.sqrt(cfg.rank * cfg.dim)
            signal = X @ G.T
            rms = np.linalg.norm(signal) / math.sqrt(signal.size)
            Y = signal + cfg.noise * rms * rng.standard_normal(signal.shape)
            Xe = (rng.standard_normal((cfg.eval_samples, k)) * sv) @ V.T
            features[layer] = FeatureBatch(layer, X)
            targets[layer] = Y
            truth[layer] = TaskVector(layer, G)
            bases[layer] = V
            spectra[layer] = sv
            eval_x[layer] = Xe
            eval_y[layer] = Xe @ (base[layer].values + G).T

        mean = cfg.proto_separation * sigma * directions[:, t]
        n_fit = 4 * (cfg.proto_dim + 1)

        def cluster(*shape):
            return mean + sigma * prng.standard_normal(shape + (cfg.proto_dim,))

        M = prng.standard_normal((cfg.proj_dim, cfg.proto_dim)) / math.sqrt(cfg.proto_dim)
        c = prng.standard_normal(cfg.proj_dim)
        gfeat = cluster(cfg.proto_samples)
        Z = cluster(n_fit)
        PZ = Z @ M.T + c
        prms = np.linalg.norm(PZ) / math.sqrt(PZ.size)
        PZ = PZ + cfg.noise * prms * prng.standard_normal(PZ.shape)
        qg = cluster(cfg.eval_queries)
        qz = cluster(cfg.eval_queries, cfg.tokens)
        tasks.append(
            SyntheticTask(
                index=t + 1,
                features=features,
                targets=targets,
                truth=truth,
                bases=bases,
                spectra=spectra,
                eval_features=eval_x,
                eval_targets=eval_y,
                global_features=gfeat,
                proj_inputs=Z,
                proj_targets=PZ,
                query_globals=qg,
                query_tokens=qz,
                query_targets=qz @ M.T + c,
            )
        )
    return SyntheticStream(cfg, layers, base, tuple(tasks))


def fit_task_adapter(task: SyntheticTask, layer: LayerId, rank: int) -> tuple[LowRankAdapter, float]:
    """Best rank-``rank`` update on the task's training data, and its residual.

    Minimises ``||X T.T - Y||_F`` over rank-constrained ``T`` (reduced-rank
    regression): whiten through the thin SVD of ``X``, truncate the SVD of the
    projected targets, map back with the minimum-norm inverse.
    """
    X = task.features[layer].samples
    Y = task.targets[layer]
    d_in = X.shape[1]
    d_out = Y.shape[1]
    if not 1 <= rank <= min(d_in, d_out):
        raise ShapeError(f"rank {rank} infeasible for a {d_out}x{d_in} layer")
    U, S, Vt = np.linalg.svd(X, full_matrices=False)
    keep = S > math.sqrt(RANK_CUTOFF) * S[0]
    U, S, Vt = U[:, keep], S[keep], Vt[keep]
    C = U.T @ Y
    P, D, Zt = np.linalg.svd(C, full_matrices=False)
    r = min(rank, D.size)
    down = np.zeros((rank, d_in))
    up = np.zeros((d_out, rank))
    down[:r] = ((Vt.T / S) @ (P[:, :r] * D[:r])).T
    up[:, :r] = Zt[:r].T
    adapter = LowRankAdapter(layer, down, up)
    residual = float(np.linalg.norm(X @ (up @ down).T - Y))
    return adapter, residual


def fit_task_projector(task: SyntheticTask) -> Projector:
    """Single linear layer fitted by least squares (with bias) on the task's tokens."""
    Z = task.proj_inputs
    Za = np.hstack([Z, np.ones((Z.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(Za, task.proj_targets, rcond=None)
    return Projector(task.index, ((coef[:-1].T, coef[-1]),), activation="identity")


def score(pred: Sequence[np.ndarray], target: Sequence[np.ndarray]) -> float:
    """``100 * max(0, 1 - ||pred - target|| / ||target||)`` over all blocks jointly."""
    err = math.sqrt(sum(float(np.sum((p - y) ** 2)) for p, y in zip(pred, target)))
    ref = math.sqrt(sum(float(np.sum(y**2)) for y in target))
    return 100.0 * max(0.0, 1.0 - err / ref)


def reasoning_accuracy(task: SyntheticTask, weights: dict) -> float:
    layers = sorted(task.eval_features)
    preds = [task.eval_features[l] @ weights[l].values.T for l in layers]
    return score(preds, [task.eval_targets[l] for l in layers])


def perception_accuracy(task: SyntheticTask, registry: ProjectorRegistry, oracle: bool = False) -> float:
    preds = []
    for g, tokens in zip(task.query_globals, task.query_tokens):
        if oracle:
            preds.append(registry.projectors[task.index - 1](tokens))
        else:
            preds.append(merged_projection(tokens, registry, g))
    return score(preds, list(task.query_targets))


def routing_accuracy(stream: SyntheticStream, registry: ProjectorRegistry) -> float:
    """Fraction of held-out queries whose largest routing weight is their own task."""
    hits = total = 0
    for task in stream:
        for g in task.query_globals:
            hits += int(np.argmax(route(registry, g)) == task.index - 1)
            total += 1
    return hits / total


@dataclass(frozen=True)
class EvalReport:
    strategy: str
    config: StreamConfig
    lam: float
    gamma: float | None
    eta: float
    accuracy: AccuracyMatrix
    metrics: Metrics
    drift: DriftReport
    perception: AccuracyMatrix
    perception_metrics: Metrics
    routing_accuracy: float
    storage: dict | None = None
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self, include_timing: bool = False) -> dict:
        doc = {
            "strategy": self.strategy,
            "config": self.config.to_json(),
            "lambda": self.lam,
            "gamma": self.gamma,
            "eta": self.eta,
            "accuracy": {**self.accuracy.to_json(), "metrics": self.metrics.to_json()},
            "drift": self.drift.to_json(),
            "perception": {
                **self.perception.to_json(),
                "metrics": self.perception_metrics.to_json(),
                "routing_accuracy": self.routing_accuracy,
            },
            "storage": self.storage,
        }
        if include_timing:
            doc["wall_time"] = self.wall_time
        return doc


def _effective_vectors(strategy, state, fitted, t, j=None):
    """Task vectors the strategy deploys after task ``t`` (for eval task ``j`` if oracle)."""
    if strategy in ("many", "many_star"):
        return state.merged_vectors()
    if strategy == "naive_average":
        return {l: naive_average([f[l] for f in fitted]) for l in fitted[0]}
    if strategy == "final_task_only":
        return fitted[t - 1]
    return fitted[j - 1]


def run_continual(
    stream: SyntheticStream,
    strategy: str = "many",
    lam: float = 1.0,
    gamma: float = DEFAULT_GAMMA,
    eta: float = DEFAULT_TEMPERATURE,
) -> EvalReport:
    """Learn the stream task by task, filling row ``t`` of both accuracy matrices after each task.

    ``lam`` scales the deployed update of the merging strategies only;
    ``final_task_only`` and ``oracle_task_id`` deploy their adapters as fitted.
    ``gamma`` is used by ``many_star`` only.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if len(stream) == 0:
        raise ValueError("empty stream")
    started = time.perf_counter()
    cfg = stream.config
    gamma = check_gamma(gamma) if strategy == "many_star" else None
    shapes = {l: stream.base[l].shape for l in stream.layers}
    state = MergedState.initial(shapes, gamma=gamma)
    registry = ProjectorRegistry(temperature=eta)
    fitted = []
    acc, perc = {}, {}
    for t, task in enumerate(stream, start=1):
        taus = {l: materialize_task_vector(fit_task_adapter(task, l, cfg.rank)[0]) for l in stream.layers}
        fitted.append(taus)
        registry = registry.append(compute_prototype(t, task.global_features), fit_task_projector(task))
        if strategy in ("many", "many_star"):
            for l in stream.layers:
                state = recursive_merge_step(state, l, task.features[l], taus[l])
        scale = lam if strategy in MERGING_STRATEGIES else 1.0
        for j in range(1, t + 1):
            vectors = _effective_vectors(strategy, state, fitted, t, j)
            weights = {l: assemble_final_weights(stream.base[l], vectors[l], scale) for l in stream.layers}
            acc[(t, j)] = reasoning_accuracy(stream[j - 1], weights)
            perc[(t, j)] = perception_accuracy(stream[j - 1], registry, strategy == "oracle_task_id")

    n = len(stream)
    if strategy == "oracle_task_id":
        drift = DriftReport([{l: 0.0 for l in stream.layers} for _ in range(n)])
    else:
        final = _effective_vectors(strategy, state, fitted, n)
        drift = drift_report(final, [task.features for task in stream], fitted)

    storage = None
    if strategy == "many_star":
        ratios, errors = [], []
        for l in stream.layers:
            cov = state.layers[l].cov
            H = sum(task.features[l].gram() for task in stream)
            ratios.append(cov.storage_ratio())
            errors.append(float(np.linalg.norm(H - reconstruct_covariance(cov)) / np.linalg.norm(H)))
        storage = {
            "storage_ratio": float(np.mean(ratios)),
            "reconstruction_error": float(np.mean(errors)),
            "retained_rank": [state.layers[l].cov.spectral.rank for l in stream.layers],
        }

    accuracy = AccuracyMatrix(n, acc)
    perception = AccuracyMatrix(n, perc)
    return EvalReport(
        strategy=strategy,
        config=cfg,
        lam=float(lam),
        gamma=gamma,
        eta=float(eta),
        accuracy=accuracy,
        metrics=compute_metrics(accuracy),
        drift=drift,
        perception=perception,
        perception_metrics=compute_metrics(perception),
        routing_accuracy=routing_accuracy(stream, registry),
        storage=storage,
        wall_time=time.perf_counter() - started,
    )
