"""Noisy-correspondence cross-modal retrieval at desk scale.

Dual encoders trained with hardest-negative triplet losses, a loss-mixture
clean/noisy co-divider, a pseudo-classifier whose predictions pick substitute
captions for mismatched pairs, oscillation-rectified margins and two
co-taught networks. Synthetic data, retrieval metrics and a CLI are included.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetBundle, SyntheticSpec, build_dataset, generate_synthetic, inject_noise, load_dataset, save_dataset
from .estimators import CoDivider, CrossModalRetriever, TwoComponentMixture
from .evaluation import RetrievalReport, SplitQualityReport, recall_metrics, split_quality
from .exceptions import (
    CheckpointError,
    ConfigError,
    DatasetParseError,
    DatasetVersionError,
    InvalidInputError,
    InvalidSpecError,
    TrainingDivergenceError,
)
from .losses import MarginParams, clean_margin, noisy_margin
from .trainer import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "CoDivider",
    "ConfigError",
    "CrossModalRetriever",
    "DatasetBundle",
    "DatasetParseError",
    "DatasetVersionError",
    "InvalidInputError",
    "InvalidSpecError",
    "MarginParams",
    "RetrievalReport",
    "SplitQualityReport",
    "SyntheticSpec",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergenceError",
    "TwoComponentMixture",
    "build_dataset",
    "clean_margin",
    "generate_synthetic",
    "inject_noise",
    "load_checkpoint",
    "load_dataset",
    "noisy_margin",
    "recall_metrics",
    "save_checkpoint",
    "save_dataset",
    "split_quality",
    "train",
]
