"""Two-view windowed-attention classifier with a small autodiff core."""

from ._core import (
    ConfigError,
    ContractError,
    DimensionError,
    Error,
    IoError,
    Model,
    ModelConfig,
    NumericError,
    ValidationError,
    auc,
    gradcheck,
    synthetic_pairs,
    train_synthetic,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "Error",
    "IoError",
    "Model",
    "ModelConfig",
    "NumericError",
    "ValidationError",
    "auc",
    "gradcheck",
    "synthetic_pairs",
    "train_synthetic",
]
