"""Training-free continual merging of low-rank adapters.

Task vectors are consolidated with a recursive least-squares update driven by
cumulative feature covariance; a prototype router blends per-task projectors.
"""

__version__ = "0.1.0"

from .adapters import (
    LayerId,
    LowRankAdapter,
    TaskVector,
    WeightMatrix,
    assemble_final_weights,
    diff_weights,
    materialize_task_vector,
)
from .covariance import (
    CumulativeCovariance,
    FeatureBatch,
    GainMatrix,
    compress_covariance,
    compute_gain,
    reconstruct_covariance,
    update_covariance,
)
from .cpm import (
    Projector,
    ProjectorRegistry,
    Prototype,
    compute_prototype,
    merged_projection,
    route,
    routing_weights,
    similarity,
)
from .errors import (
    ChecksumError,
    NumericalError,
    RLSMergeError,
    ShapeError,
    StoreError,
    TruncatedBlobError,
    UnknownKindError,
    VersionError,
    ZeroNormError,
)
from .lpm import (
    DriftReport,
    LayerState,
    MergedState,
    batch_merge_oracle,
    drift_objective,
    drift_report,
    feature_drift,
    merge_sequence,
    momentum_solution,
    naive_average,
    recursive_merge_step,
)
from .metrics import AccuracyMatrix, Metrics, compute_metrics
from .numerics import SpectralDecomposition, energy_rank, psd_eigh, solve_psd, truncated_svd
from .simulator import EvalReport, StreamConfig, generate_stream, run_continual
from .store import load_bundle, read_manifest, save_bundle
