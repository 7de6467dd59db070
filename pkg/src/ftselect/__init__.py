"""Fine-tuning model selection from rectified scaling-law fits of loss curves."""

__version__ = "0.1.0"

from .errors import (
    DimensionError,
    FtselectError,
    InsufficientDataError,
    NumericalError,
    ProviderError,
    TrainingDivergence,
    ValidationError,
)
from .scaling import FitConfig, FitResult, LossCurve, LossObservation, RectifiedParams, fit_two_phase, predict_rectified
from .selection import SelectionReport, progressive_select, rank_pool

__all__ = [
    "DimensionError",
    "FitConfig",
    "FitResult",
    "FtselectError",
    "InsufficientDataError",
    "LossCurve",
    "LossObservation",
    "NumericalError",
    "ProviderError",
    "RectifiedParams",
    "SelectionReport",
    "TrainingDivergence",
    "ValidationError",
    "__version__",
    "fit_two_phase",
    "predict_rectified",
    "progressive_select",
    "rank_pool",
]
