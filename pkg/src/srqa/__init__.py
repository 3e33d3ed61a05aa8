"""Dual-branch reduced-reference quality assessment for super-resolved images."""

from .datamodel import (
    DatasetSpec,
    ExperimentConfig,
    FeatureBundle,
    BranchFeatures,
    QualityPrediction,
    Sample,
    validate_sample,
)
from .metrics import EvalReport, ProtocolReport, plcc, psnr, srcc, ssim
from .model import PerceptionFidelityModel, build_model

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec",
    "ExperimentConfig",
    "FeatureBundle",
    "BranchFeatures",
    "QualityPrediction",
    "Sample",
    "validate_sample",
    "EvalReport",
    "ProtocolReport",
    "plcc",
    "psnr",
    "srcc",
    "ssim",
    "PerceptionFidelityModel",
    "build_model",
    "__version__",
]
