"""Trainable toy encoder/decoder exercising the mixed query pool."""

from .inference import (
    QueryPrediction,
    foreground_soft_mask,
    instance_segments,
    panoptic_segments,
    predict,
    referring_masks,
    semantic_map,
)
from .model import FeatureMap, ModelConfig, ToyModel, init_params, param_shapes, select_topk
from .synthetic import overfit_dataset, synthesize_image
from .train import AdamW, TrainConfig, TrainResult, learning_rate_at, load_checkpoint, save_checkpoint, train

__all__ = [
    "AdamW",
    "FeatureMap",
    "ModelConfig",
    "QueryPrediction",
    "ToyModel",
    "TrainConfig",
    "TrainResult",
    "foreground_soft_mask",
    "init_params",
    "instance_segments",
    "learning_rate_at",
    "load_checkpoint",
    "overfit_dataset",
    "panoptic_segments",
    "param_shapes",
    "predict",
    "referring_masks",
    "save_checkpoint",
    "select_topk",
    "semantic_map",
    "synthesize_image",
    "train",
]
