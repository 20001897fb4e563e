"""InterFormer: interleaved non-sequence and sequence arches for CTR prediction,
built on a small reverse-mode autograd core over numpy."""

from .autograd import Tensor, backward
from .config import ModelConfig
from .errors import (AssemblyError, ConfigError, CorruptionError, DataError, DegenerateAttentionError,
                     DimensionError, IngestionError, InterFormerError, NonFiniteError, ParseError, SchemaError,
                     UndefinedMetricError, VersionError)
from .features import Dataset, FeatureSchema, GenConfig, generate_synthetic, load_csv, save_csv
from .metrics import auc, evaluate, gauc, log_loss, normalized_entropy
from .model import InterFormer, interformer_forward, load_checkpoint, param_count, save_checkpoint
from .train import AdamState, TrainConfig, TrainReport, adam_step, cross_entropy, train

__version__ = "0.1.0"

__all__ = [
    "AdamState", "AssemblyError", "ConfigError", "CorruptionError", "DataError", "Dataset",
    "DegenerateAttentionError", "DimensionError", "FeatureSchema", "GenConfig", "IngestionError", "InterFormer",
    "InterFormerError", "ModelConfig", "NonFiniteError", "ParseError", "SchemaError", "Tensor", "TrainConfig",
    "TrainReport", "UndefinedMetricError", "VersionError", "adam_step", "auc", "backward", "cross_entropy",
    "evaluate", "gauc", "generate_synthetic", "interformer_forward", "load_checkpoint", "load_csv", "log_loss",
    "normalized_entropy", "param_count", "save_checkpoint", "save_csv", "train",
]
