"""Zero-shot anomaly segmentation with image-conditioned prompts on a frozen CLIP-style backbone."""
from .backbone import Backbone, BackboneConfig, init_random, load_weights
from .config import RunConfig, load_config
from .engine import VCPModel, build_model, infer, load_checkpoint, save_checkpoint, train
from .errors import VCPError

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "BackboneConfig",
    "RunConfig",
    "VCPError",
    "VCPModel",
    "build_model",
    "infer",
    "init_random",
    "load_checkpoint",
    "load_config",
    "load_weights",
    "save_checkpoint",
    "train",
]
