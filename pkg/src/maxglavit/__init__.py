"""MaxViT-family image classifiers on a small numpy autodiff core."""
from .estimator import MaxGlaViTClassifier
from .model import ModelConfig, build, load_checkpoint, preset, save_checkpoint
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["MaxGlaViTClassifier", "ModelConfig", "Tensor", "backward", "build", "load_checkpoint",
           "no_grad", "preset", "save_checkpoint"]
