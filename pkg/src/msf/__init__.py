"""Multi-scale residual factorization diffusion at desk scale.

A latent grid is decomposed into a low-resolution base plus per-scale
residuals, a shared rectified-flow transformer learns each scale with
teacher-forced priors, and sampling accumulates residuals coarse-to-fine
with cheap refinement scales.
"""

from .cost import CostModelParams, StageCost, flops_cost, speedup_ratio, token_count
from .dataset import DatasetSpec, LabeledDataset, class_template, synth_dataset
from .errors import ConfigError, DivergenceError, MsfError, ShapeError
from .experiment import (
    ExperimentConfig,
    RunResult,
    load_experiment_config,
    parse_experiment_config,
    run_experiment,
)
from .factorize import (
    Codec,
    PriorSet,
    ResidualPyramid,
    ScaleSchedule,
    extract_priors,
    extract_residuals,
    factorize_scaling_image,
    factorize_scaling_latent,
    load_grid_set,
    load_pyramid,
    reconstruct,
    save_grid_set,
    save_pyramid,
)
from .grid import LatentGrid, combine, load_grid, resize, save_grid
from .metrics import (
    MetricsReport,
    eval_metrics,
    median_bandwidth,
    rbf_mmd2,
    relative_error,
)
from .sampler import (
    GenerationBatch,
    GenerationResult,
    SampleConfig,
    euler_integrate,
    euler_solve,
    expected_evaluations,
    generate,
    generate_batch,
    replay,
)
from .training import (
    TrainConfig,
    TrainResult,
    TrainingExample,
    TrainingItem,
    make_example,
    plateau_reached,
    prepare_training_set,
    rf_loss,
    rf_loss_and_grads,
    train_stage,
)
from .velocity import (
    ConditionBundle,
    VelocityConfig,
    VelocityField,
    forward,
    forward_cfg,
    guided_velocity,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "CostModelParams",
    "StageCost",
    "flops_cost",
    "speedup_ratio",
    "token_count",
    "DatasetSpec",
    "LabeledDataset",
    "class_template",
    "synth_dataset",
    "ConfigError",
    "DivergenceError",
    "MsfError",
    "ShapeError",
    "ExperimentConfig",
    "RunResult",
    "load_experiment_config",
    "parse_experiment_config",
    "run_experiment",
    "Codec",
    "PriorSet",
    "ResidualPyramid",
    "ScaleSchedule",
    "extract_priors",
    "extract_residuals",
    "factorize_scaling_image",
    "factorize_scaling_latent",
    "load_grid_set",
    "load_pyramid",
    "reconstruct",
    "save_grid_set",
    "save_pyramid",
    "LatentGrid",
    "combine",
    "load_grid",
    "resize",
    "save_grid",
    "MetricsReport",
    "eval_metrics",
    "median_bandwidth",
    "rbf_mmd2",
    "relative_error",
    "GenerationBatch",
    "GenerationResult",
    "SampleConfig",
    "euler_integrate",
    "euler_solve",
    "expected_evaluations",
    "generate",
    "generate_batch",
    "replay",
    "TrainConfig",
    "TrainResult",
    "TrainingExample",
    "TrainingItem",
    "make_example",
    "plateau_reached",
    "prepare_training_set",
    "rf_loss",
    "rf_loss_and_grads",
    "train_stage",
    "ConditionBundle",
    "VelocityConfig",
    "VelocityField",
    "forward",
    "forward_cfg",
    "guided_velocity",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
]
