"""Keypoint-only action recognition and localization with a hierarchical transformer."""

from .model import KeyNet, ModelConfig, count_parameters, load_checkpoint, save_checkpoint
from .scene import SceneConfig, SceneSequence, TokenizedScene, tokenize_scene
from .train import TrainConfig, lr_at, train_loop

__version__ = "0.1.0"

__all__ = [
    "KeyNet",
    "ModelConfig",
    "SceneConfig",
    "SceneSequence",
    "TokenizedScene",
    "TrainConfig",
    "count_parameters",
    "load_checkpoint",
    "lr_at",
    "save_checkpoint",
    "tokenize_scene",
    "train_loop",
]
