"""Dynamic neural representational decoders for semantic segmentation, in NumPy."""

from .core import NrdConfig, build_param_layout, make_coordinate_map, nrd_decode
from .model import EncoderConfig, ModelConfig
from .tensors import IGNORE

__all__ = [
    "IGNORE",
    "EncoderConfig",
    "ModelConfig",
    "NrdConfig",
    "build_param_layout",
    "make_coordinate_map",
    "nrd_decode",
]
