"""Modality-agnostic multi-modal semantic segmentation at desk scale."""

from .data import DEFAULT_REGISTRY, ModalitySample, Registry, SceneConfig, synthesize
from .model import MagicNet, ModelConfig
from .trainer import TrainConfig, train

__all__ = [
    "DEFAULT_REGISTRY",
    "MagicNet",
    "ModalitySample",
    "ModelConfig",
    "Registry",
    "SceneConfig",
    "TrainConfig",
    "synthesize",
    "train",
]
