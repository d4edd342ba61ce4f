"""Multi-level rotary time embeddings (year, month, day) for sequential recommendation."""

from .backbone import EncodingMode, Model, ModelConfig, forward, init_parameters
from .calendar_time import TemporalTriplet, decompose_timestamp
from .rote_core import RoTEConfig, fuse_levels, rote_transform_qk

__all__ = [
    "EncodingMode", "Model", "ModelConfig", "RoTEConfig", "TemporalTriplet",
    "decompose_timestamp", "forward", "fuse_levels", "init_parameters", "rote_transform_qk",
]
__version__ = "0.1.0"
