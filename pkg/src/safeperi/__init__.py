"""Periocular recognition with SAFE symmetry descriptors, texture and keypoint baselines, and an EER harness."""

from .config import RunConfig
from .safe import SafeConfig, SafeDescriptor, extract, match, match_with_rotation, rotate_descriptor

__all__ = ["RunConfig", "SafeConfig", "SafeDescriptor", "extract", "match", "match_with_rotation",
           "rotate_descriptor"]
__version__ = "0.1.0"
