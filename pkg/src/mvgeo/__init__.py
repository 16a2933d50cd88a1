"""Feed-forward multi-view geometry on a small numpy autodiff engine."""

from .backbone import Backbone, ModelConfig, TokenSequence
from .config import TrainConfig, load_config, parse_config
from .geometry import CameraParams, normalize_scene, umeyama_align, unproject_depth
from .heads import Model, ModelOutput
from .losses import LossConfig, total_loss
from .metrics import MetricReport
from .synthgen import SceneSample, generate_scene
from .tensor import Tape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "Backbone", "CameraParams", "LossConfig", "MetricReport", "Model", "ModelConfig", "ModelOutput",
    "SceneSample", "Tape", "Tensor", "TokenSequence", "TrainConfig", "generate_scene", "grad_check",
    "load_config", "normalize_scene", "parse_config", "total_loss", "umeyama_align", "unproject_depth",
]
