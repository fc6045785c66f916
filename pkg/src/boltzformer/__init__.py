"""Boltzmann attention sampling decoder for prompted small-object segmentation."""

from .boltzmann import SamplerConfig
from .config import RunConfig
from .decoder import BoltzDecoder, DecoderConfig
from .encoder import EncoderConfig
from .model import BoltzFormer, ModelConfig, build_model
from .synthdata import SceneConfig
from .train import TrainConfig

__all__ = [
    "BoltzDecoder",
    "BoltzFormer",
    "DecoderConfig",
    "EncoderConfig",
    "ModelConfig",
    "RunConfig",
    "SamplerConfig",
    "SceneConfig",
    "TrainConfig",
    "build_model",
]
__version__ = "0.1.0"
