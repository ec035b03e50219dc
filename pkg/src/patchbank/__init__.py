"""Patch-feature anomaly localization against a compressed memory bank.

The pipeline: read pre-extracted multi-scale CNN features, align them into
per-patch vectors, embed them through a small learnable linear descriptor,
summarize the normal training features into a fixed bank of centers, adapt
the descriptor so normal embeddings hug the bank, then score test patches
by certainty-weighted nearest-center distance.
"""

from .bank import (
    BankConfig,
    MemoryBank,
    NeighborSet,
    build_bank,
    compressed_count,
    ema_update,
    kmeans_init,
    knn,
    load_bank,
    match_nearest_unused,
    nearest_centers,
    save_bank,
)
from .descriptor import (
    DescriptorGrads,
    OptimizerConfig,
    OptimizerState,
    PatchDescriptor,
    embed_backward,
    embed_grid,
    init_descriptor,
    init_optimizer_state,
    load_descriptor,
    optimizer_step,
    save_descriptor,
)
from .errors import (
    BadMagicError,
    EvaluationError,
    FeatureFormatError,
    ManifestError,
    NonFiniteGradientError,
    NonFiniteLossError,
    NonFinitePayloadError,
    PatchBankError,
    TruncatedPayloadError,
    ValidationError,
)
from .evaluation import (
    EvalReport,
    RocResult,
    auroc,
    evaluate_class,
    f1_threshold,
    load_report,
    pixel_auroc,
    score_test_split,
    write_report,
)
from .featureio import (
    DatasetManifest,
    ManifestEntry,
    MultiScaleFeatureSet,
    load_manifest,
    read_feature_header,
    read_feature_set,
    read_mask,
    write_feature_set,
    write_manifest,
    write_mask,
)
from .losses import (
    AdaptationParams,
    LossBreakdown,
    adaptation_loss,
    attraction_loss,
    repulsion_loss,
)
from .patches import PatchGrid, assemble_patch_grid, bilinear_upsample, patch_at
from .scoring import (
    AnomalyScoreMap,
    HeatmapStack,
    build_heatmaps,
    certainty_score,
    finalize_map,
    gaussian_blur,
    gaussian_kernel,
    naive_score,
    score_sample,
)
from .synthetic import SyntheticSpec, benchmark_spec, generate
from .training import EpochStats, train

__version__ = "0.1.0"
