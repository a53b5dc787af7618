"""Joint sound event detection and acoustic scene classification:
a shared convolutional trunk with recurrent event and convolutional scene
branches, trained with a weighted two-task objective."""

from .model import (ModelConfig, MultitaskModel, build, desk_config,
                    full_config, tiny_config)
from .training import TrainConfig, train, event_loss, scene_loss, mtl_loss

__all__ = [
    "ModelConfig", "MultitaskModel", "build",
    "full_config", "desk_config", "tiny_config",
    "TrainConfig", "train", "event_loss", "scene_loss", "mtl_loss",
]
