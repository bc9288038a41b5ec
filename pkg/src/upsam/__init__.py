"""Unsupervised pansharpening with a stick-breaking self-attention autoencoder."""

from .attnet import NetworkConfig, TrainedModel, encode_image, decode_image, train
from .fusion import FusionConfig, FusionResult, pansharpen
from .protocol import DegradeConfig, upsample, wald_reduce
from .raster import RasterImage, load_raster, save_raster

__all__ = [
    "DegradeConfig",
    "FusionConfig",
    "FusionResult",
    "NetworkConfig",
    "RasterImage",
    "TrainedModel",
    "decode_image",
    "encode_image",
    "load_raster",
    "pansharpen",
    "save_raster",
    "train",
    "upsample",
    "wald_reduce",
]
