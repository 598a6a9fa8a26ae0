"""Proposal-weighting gate with threshold truncation, plus the synthetic
imbalance simulator and training harness used to exercise it."""

from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    EmptyPoolError,
    NumericError,
    ProbanetError,
)
from .gate import (
    GateOutput,
    GateParamGrads,
    GateParams,
    LossTerms,
    allocated_param_count,
    gate_backward,
    gate_forward,
    init_gate_params,
    mac_count,
    param_count,
    param_megabytes,
    probanet_loss,
    probanet_loss_grad_v,
    truncate,
    variance_constraint,
)
from .rng import SplitMix64, derive_seed, mix64
from .sim import (
    BATCH_SIZE,
    BG,
    FG,
    FG_QUOTA,
    IGNORE,
    AnchorGrid,
    Box,
    LabelArrays,
    MiniBatch,
    Scene,
    SimConfig,
    generate_scene,
    grid_for,
    hard_ratio,
    iou,
    label_anchors,
    label_arrays,
    sample_minibatch,
)
from .tensor import (
    Conv1x1Params,
    as_feature_map,
    conv1x1_backward,
    conv1x1_forward,
    dump_feature_map,
    finite_diff_gradient,
    hadamard,
    load_feature_map,
    mean_and_variance,
    relu,
    sigmoid,
)
from .training import (
    METRICS_HEADER,
    ExperimentReport,
    MetricsLog,
    MetricsRecord,
    RunResult,
    SeedPair,
    TrainConfig,
    TrainState,
    build_scene_pool,
    init_state,
    run_experiment,
    run_partial,
    run_training,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorGrid",
    "BATCH_SIZE",
    "BG",
    "Box",
    "ConfigError",
    "Conv1x1Params",
    "DimensionError",
    "DomainError",
    "EmptyPoolError",
    "ExperimentReport",
    "FG",
    "FG_QUOTA",
    "GateOutput",
    "GateParamGrads",
    "GateParams",
    "IGNORE",
    "LabelArrays",
    "LossTerms",
    "METRICS_HEADER",
    "MetricsLog",
    "MetricsRecord",
    "MiniBatch",
    "NumericError",
    "ProbanetError",
    "RunResult",
    "Scene",
    "SeedPair",
    "SimConfig",
    "SplitMix64",
    "TrainConfig",
    "TrainState",
    "allocated_param_count",
    "as_feature_map",
    "build_scene_pool",
    "conv1x1_backward",
    "conv1x1_forward",
    "derive_seed",
    "dump_feature_map",
    "finite_diff_gradient",
    "gate_backward",
    "gate_forward",
    "generate_scene",
    "grid_for",
    "hadamard",
    "hard_ratio",
    "init_gate_params",
    "init_state",
    "iou",
    "label_anchors",
    "label_arrays",
    "load_feature_map",
    "mac_count",
    "mean_and_variance",
    "mix64",
    "param_count",
    "param_megabytes",
    "probanet_loss",
    "probanet_loss_grad_v",
    "relu",
    "run_experiment",
    "run_partial",
    "run_training",
    "sample_minibatch",
    "sigmoid",
    "train_step",
    "truncate",
    "variance_constraint",
]
