"""Adaptive affinity field losses for semantic segmentation, at desk scale.

Pairwise KL-Bernoulli affinity losses with adversarially learned
per-class kernel-size weights, a small differentiable segmenter with
manual backprop, synthetic scene generation, and the matching evaluation
metrics (pixel and instance-weighted mIoU, boundary precision/recall).
"""

from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .datasets import (
    BarsShape,
    BlobShape,
    DatasetSpec,
    ManifestDataset,
    RingShape,
    SceneSpec,
    SynthScene,
    generate,
    load_dataset,
    make_scene,
    save_dataset,
    thinblob32,
)
from .estimator import AAFSegmenter
from .experiments import (
    RunRecord,
    evaluate_predictions,
    gradient_check,
    kernel_report,
    run_experiment,
    trivial_solution_probe,
)
from .grids import (
    EmbedGrid,
    FeatureMap,
    KernelSpec,
    LabelGrid,
    PairSet,
    ProbGrid,
    SeggridError,
    make_pairs,
    one_hot,
    read_grid,
    write_grid,
)
from .losses import (
    HyperParams,
    LossGrad,
    LossValue,
    affinity_loss,
    combined_objective,
    contrastive_loss,
    kl_bernoulli,
    multiscale_aaf,
    softmax_chain,
    unary_ce,
)
from .metrics import (
    boundary_map,
    boundary_prf,
    boundary_prf_per_class,
    confusion_matrix,
    instance_miou,
    miou,
    pixel_accuracy,
)
from .minimax import (
    TERM_EDGE,
    TERM_NONEDGE,
    MinimaxConfig,
    SimplexWeights,
    ascend_weights,
    effective_kernel_size,
    project_to_simplex,
)
from .network import ToySegmenter, load_model, save_model
from .training import TrainConfig, TrainingDiverged, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "AAFSegmenter",
    "BarsShape",
    "BlobShape",
    "ConfigError",
    "DatasetSpec",
    "EmbedGrid",
    "ExperimentConfig",
    "FeatureMap",
    "HyperParams",
    "KernelSpec",
    "LabelGrid",
    "LossGrad",
    "LossValue",
    "ManifestDataset",
    "MinimaxConfig",
    "PairSet",
    "ProbGrid",
    "RingShape",
    "RunRecord",
    "SceneSpec",
    "SeggridError",
    "SimplexWeights",
    "SynthScene",
    "TERM_EDGE",
    "TERM_NONEDGE",
    "ToySegmenter",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "affinity_loss",
    "ascend_weights",
    "boundary_map",
    "boundary_prf",
    "boundary_prf_per_class",
    "combined_objective",
    "config_from_dict",
    "confusion_matrix",
    "contrastive_loss",
    "effective_kernel_size",
    "evaluate_predictions",
    "generate",
    "gradient_check",
    "instance_miou",
    "kernel_report",
    "kl_bernoulli",
    "load_config",
    "load_dataset",
    "load_model",
    "make_pairs",
    "make_scene",
    "miou",
    "multiscale_aaf",
    "one_hot",
    "pixel_accuracy",
    "project_to_simplex",
    "read_grid",
    "run_experiment",
    "save_dataset",
    "save_model",
    "softmax_chain",
    "thinblob32",
    "train",
    "trivial_solution_probe",
    "unary_ce",
    "write_grid",
]
