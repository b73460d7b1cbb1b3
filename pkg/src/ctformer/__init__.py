"""Continuous-time causal transformer for early event prediction on irregular clinical time series."""
from .data import PatientSequence, SyntheticConfig, generate_synthetic_cohort
from .kernels import BACKEND
from .model import CTFormer, ModelConfig

__version__ = "0.1.0"

__all__ = ["BACKEND", "CTFormer", "ModelConfig", "PatientSequence", "SyntheticConfig",
           "generate_synthetic_cohort", "__version__"]
