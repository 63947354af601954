"""Multi-resolution vision transformer training at desk scale.

A from-scratch tensor/autodiff core, resolution-conditioned positional
embeddings, replicated-batch multi-resolution training with a
scale-consistency distillation loss, and a CLI for sweeps and ablations.
"""

from .errors import (
    CompatibilityError,
    ConfigError,
    DataError,
    FormatError,
    ResolutionError,
    ShapeError,
    UsageError,
)
from .model import ModelConfig, TokenSequence, VisionTransformer
from .optim import ParameterSet, adamw_step, cosine_lr
from .posembed import PositionalEmbedding, SinCosConfig
from .tensor import Tape, Tensor
from .train import KDConfig, MultiResBatch, RunConfig, train_run

__version__ = "0.1.0"

__all__ = [
    "CompatibilityError",
    "ConfigError",
    "DataError",
    "FormatError",
    "KDConfig",
    "ModelConfig",
    "MultiResBatch",
    "ParameterSet",
    "PositionalEmbedding",
    "ResolutionError",
    "RunConfig",
    "ShapeError",
    "SinCosConfig",
    "Tape",
    "Tensor",
    "TokenSequence",
    "UsageError",
    "VisionTransformer",
    "adamw_step",
    "cosine_lr",
    "train_run",
]
