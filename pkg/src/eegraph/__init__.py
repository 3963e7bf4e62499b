"""Graph-spectral EEG decoding with a skip-or-classify agent.

Two-stage pipeline over multichannel time-point signals:

1. A Chebyshev spectral graph convolutional classifier whose adjacency
   is a fixed fully-connected base modulated by a trainable mask, sparsified
   by iterative magnitude pruning (``gcn``, ``graph``, ``pruning``).
2. A dueling deep Q-network that, per time point, either emits one of four
   class labels or skips to the next point (``env``, ``dqn``).

``data`` holds preprocessing (notch filter, z-normalisation), a synthetic
generator for desk-scale verification, and file ingestion; ``cli`` wires
everything into runnable experiments.
"""

from eegraph.tensor import (
    AdamState,
    DimensionError,
    Tensor,
    TrainingDivergedError,
    adam_step,
    finite_diff_check,
    matmul,
)
from eegraph.graph import (
    AdjacencyMask,
    BaseAdjacency,
    ChebLayerWeights,
    GraphWarning,
    ScaledLaplacian,
    cheb_conv,
    effective_adjacency,
    normalized_laplacian,
    scale_laplacian,
)
from eegraph.gcn import FeatureExtractor, GcnClassifier, GcnConfig, GcnTrainConfig, train_gcn
from eegraph.pruning import PruneLevel, PruningConfig, PruningSchedule, prune_mask, run_glt
from eegraph.env import (
    Episode,
    RewardConfig,
    State,
    StepResult,
    build_episodes,
    split_episodes,
    step,
)
from eegraph.dqn import (
    DuelingConfig,
    DuelingNet,
    EvalResult,
    MetricsSummary,
    TrainerConfig,
    bellman_target,
    build_buffer,
    compute_metrics,
    evaluate,
    train_dqn,
)
from eegraph.data import (
    PipelineWarning,
    Recording,
    SyntheticDataset,
    SyntheticSpec,
    generate_synthetic,
    ingest,
    notch_filter,
    preprocess,
    slice_trials,
    znorm,
)

__version__ = "0.1.0"
