"""Action segmentation with substructured switching linear dynamics."""
from .duration import DurationParams, duration_pmf, fit_dbm_omega, fit_logistic_duration, reset_probability
from .errors import (
    BlockConsistencyError,
    FallbackWarning,
    ModelFormatError,
    SingularCovarianceError,
    StmsegError,
    TrainingError,
)
from .gaussian import (
    GaussianBelief,
    LdsParams,
    condition_previous_state,
    gaussian_logpdf,
    kalman_step,
    sigma_points,
    sigmoid_gaussian_expectation,
)
from .model import ActionModel, FullModel, HiddenPath, log_joint, sample_sequence, validate
from .modelio import load_model, save_model
from .rbpf import dominant_primitive, extract_labels, init_filter, refine_boundaries, run_filter, step
from .stm import StageMap, count_transitions, estimate_blockwise_map, estimate_sparse_map
from .training import LabeledDataset, TrainingConfig, train

__all__ = [
    "ActionModel", "BlockConsistencyError", "DurationParams", "FallbackWarning", "FullModel",
    "GaussianBelief", "HiddenPath", "LabeledDataset", "LdsParams", "ModelFormatError",
    "SingularCovarianceError", "StageMap", "StmsegError", "TrainingConfig", "TrainingError",
    "condition_previous_state", "count_transitions", "dominant_primitive", "duration_pmf",
    "estimate_blockwise_map", "estimate_sparse_map", "extract_labels", "fit_dbm_omega",
    "fit_logistic_duration", "gaussian_logpdf", "init_filter", "kalman_step", "load_model",
    "log_joint", "refine_boundaries", "reset_probability", "run_filter", "sample_sequence",
    "save_model", "sigma_points", "sigmoid_gaussian_expectation", "step", "train", "validate",
]
