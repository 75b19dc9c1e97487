"""MCI-to-AD progression prediction from MRI, generated PET and assessment tables.

A 3-D GAN with a ViT middle block translates MRI into PET; its latent
patch tokens, together with embedded assessment-scale columns, feed a
selective-scan (Mamba) classifier with a voxel-level cross-attention head.
"""
from .errors import CheckpointError, DivergenceError, ValidationError
from .generator import Generator, GeneratorConfig
from .mamba import ClassifierConfig, MambaClassifier, selective_scan
from .tabular import TabularSchema, fit_schema
from .training import TrainConfig, preset_configs

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "DivergenceError",
    "ValidationError",
    "Generator",
    "GeneratorConfig",
    "ClassifierConfig",
    "MambaClassifier",
    "selective_scan",
    "TabularSchema",
    "fit_schema",
    "TrainConfig",
    "preset_configs",
]
