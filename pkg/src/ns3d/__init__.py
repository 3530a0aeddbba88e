"""Coarse-to-fine autoregressive 3D shape generation.

A query-based multi-scale tokenizer maps unordered point clouds to discrete
token maps at increasing levels of detail; a decoder-only autoregressive
model generates those token maps coarse to fine, decoded back to occupancy
fields and triangle meshes.
"""

from .layers import AttentionConfig, set_precision
from .tokenizer import CrossScaleTokenizer, TokenizerConfig
from .car import CarConfig, CarModel

__all__ = [
    "AttentionConfig",
    "set_precision",
    "CrossScaleTokenizer",
    "TokenizerConfig",
    "CarConfig",
    "CarModel",
]

__version__ = "0.1.0"
