from .blocks import pixel_shuffle, pixel_unshuffle
from .heads import CascadeHeads, CascadeOutputs, composite_loss, encode_priors
from .hsi import HsiEncoder, HsiEncoderConfig
from .msi import MsiEncoder, MsiEncoderConfig, reshape_skip
from .network import (
    CropClassifier,
    ModalityConfig,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "CascadeHeads",
    "CascadeOutputs",
    "CropClassifier",
    "HsiEncoder",
    "HsiEncoderConfig",
    "ModalityConfig",
    "ModelConfig",
    "MsiEncoder",
    "MsiEncoderConfig",
    "composite_loss",
    "encode_priors",
    "load_checkpoint",
    "pixel_shuffle",
    "pixel_unshuffle",
    "reshape_skip",
    "save_checkpoint",
]
