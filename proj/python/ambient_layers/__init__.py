"""Layer criticality, weight churn and federated dropout experiments."""

from ._core import (
    AmbientError,
    Config,
    ConfigError,
    ablate,
    churn,
    fl,
    load_checkpoint,
    preset,
    preset_names,
    report,
    train,
)

__all__ = [
    "AmbientError",
    "Config",
    "ConfigError",
    "ablate",
    "churn",
    "fl",
    "load_checkpoint",
    "preset",
    "preset_names",
    "report",
    "train",
]
