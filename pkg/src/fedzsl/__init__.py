"""Federated zero-shot learning over class-disjoint clients.

A deterministic, numpy-only simulator and library: attribute-based
zero-shot classifiers trained federatedly, a sparse inverse-covariance
estimate of class similarity used for cross-client distillation, a
bilateral visual-semantic reconstruction term, class-count-weighted
aggregation, ZSL/GZSL metrics, and an executable check suite for the
supporting theory.
"""

from fedzsl.dataset import (
    AttributeMatrix,
    ClassSplit,
    DatasetError,
    FeatureDataset,
    FormatError,
    LabelError,
    MissingFileError,
    SplitError,
    SyntheticSpec,
    generate_synthetic,
    load_attributes,
    load_dataset,
    save_dataset,
    split_train_test,
)
from fedzsl.evaluation import (
    EvalError,
    Metrics,
    evaluate,
    harmonic_mean,
    per_class_top1,
    predict,
)
from fedzsl.fed import (
    ClientUpdate,
    FedError,
    RoundMetrics,
    SimulationTrace,
    TrainConfig,
    TrainingDivergedError,
    aggregate,
    local_train,
    metrics_to_csv,
    run_simulation,
)
from fedzsl.glasso import (
    DistillTargets,
    GlassoConfig,
    GlassoError,
    SimilarityMatrix,
    distill_targets,
    glasso_objective,
    graphical_lasso,
    sample_covariance,
)
from fedzsl.losses import (
    AblationFlags,
    DistillConfig,
    LossError,
    LossReport,
    LossWeights,
    NonFiniteLossError,
    ad_loss,
    bc_loss,
    ce_loss_attribute_free,
    joint_loss,
    kl_loss,
    sce_loss,
)
from fedzsl.model import (
    ATTRIBUTE_BASED,
    ATTRIBUTE_FREE,
    ModelError,
    ModelParams,
    OptState,
    compatibility_logits,
    forward_attr,
    forward_decode,
    init_opt_state,
    init_params,
    load_model,
    save_model,
    sgd_step,
)
from fedzsl.partition import (
    ClientPartition,
    PartitionError,
    PartitionSpec,
    partition,
    partition_summary,
    sample_clients,
)
from fedzsl.theory import (
    AssumptionError,
    CheckResult,
    TheoryReport,
    build_theory_report,
    check_attr_error_bound,
    check_client_alignment,
    check_kl_lipschitz,
    check_left_inverse_bound,
    check_margin_theorem,
    check_mixture_convexity,
    check_pinsker,
    run_check_suite,
    spectral_bounds,
)

__version__ = "0.1.0"

__all__ = [
    "ATTRIBUTE_BASED",
    "ATTRIBUTE_FREE",
    "AblationFlags",
    "AssumptionError",
    "AttributeMatrix",
    "CheckResult",
    "ClassSplit",
    "ClientPartition",
    "ClientUpdate",
    "DatasetError",
    "DistillConfig",
    "DistillTargets",
    "EvalError",
    "FeatureDataset",
    "FedError",
    "FormatError",
    "GlassoConfig",
    "GlassoError",
    "LabelError",
    "LossError",
    "LossReport",
    "LossWeights",
    "Metrics",
    "MissingFileError",
    "ModelError",
    "ModelParams",
    "NonFiniteLossError",
    "OptState",
    "PartitionError",
    "PartitionSpec",
    "RoundMetrics",
    "SimilarityMatrix",
    "SimulationTrace",
    "SplitError",
    "SyntheticSpec",
    "TheoryReport",
    "TrainConfig",
    "TrainingDivergedError",
    "ad_loss",
    "aggregate",
    "bc_loss",
    "build_theory_report",
    "ce_loss_attribute_free",
    "check_attr_error_bound",
    "check_client_alignment",
    "check_kl_lipschitz",
    "check_left_inverse_bound",
    "check_margin_theorem",
    "check_mixture_convexity",
    "check_pinsker",
    "compatibility_logits",
    "distill_targets",
    "evaluate",
    "forward_attr",
    "forward_decode",
    "generate_synthetic",
    "glasso_objective",
    "graphical_lasso",
    "harmonic_mean",
    "init_opt_state",
    "init_params",
    "joint_loss",
    "kl_loss",
    "load_attributes",
    "load_dataset",
    "load_model",
    "local_train",
    "metrics_to_csv",
    "partition",
    "partition_summary",
    "per_class_top1",
    "predict",
    "run_check_suite",
    "run_simulation",
    "sample_clients",
    "sample_covariance",
    "save_dataset",
    "save_model",
    "sce_loss",
    "sgd_step",
    "spectral_bounds",
    "split_train_test",
]
