"""
maskcls - mask classification segmentation at desk scale.

One model family predicts N (class distribution, binary mask) pairs per
image and serves semantic and panoptic segmentation alike.
"""

from .data import GroundTruth, Sample, SceneConfig, generate_dataset, load_dataset, save_dataset
from .errors import (CheckpointError, ConfigError, DatasetError, DomainError, GraphError,
                     MaskClsError, MatchingError, ShapeError, TrainingError)
from .inference import InferenceConfig, general_inference, semantic_inference
from .losses import LossWeights, mask_cls_loss
from .matching import bipartite_matcher, fixed_matching, hungarian
from .metrics import MetricReport, miou, panoptic_quality
from .model import ModelConfig, PredictionSet, forward, init_params, predict
from .train import TrainConfig, Trainer, train_loop

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "DomainError",
    "GraphError",
    "GroundTruth",
    "InferenceConfig",
    "LossWeights",
    "MaskClsError",
    "MatchingError",
    "MetricReport",
    "ModelConfig",
    "PredictionSet",
    "Sample",
    "SceneConfig",
    "ShapeError",
    "TrainConfig",
    "Trainer",
    "TrainingError",
    "bipartite_matcher",
    "fixed_matching",
    "forward",
    "general_inference",
    "generate_dataset",
    "hungarian",
    "init_params",
    "load_dataset",
    "mask_cls_loss",
    "miou",
    "panoptic_quality",
    "predict",
    "save_dataset",
    "semantic_inference",
    "train_loop",
]
