"""Probability-weighted compact binary codes for cross-domain retrieval."""

from .dataio import (DatasetPair, RunConfig, ShiftSpec, Standardizer,
                     generate_synthetic_pair, parse_config)
from .hamming import BinaryCodes, pack, retrieve, unpack
from .optimizer import CodesPair, PwcfModel, train

__version__ = "0.1.0"

__all__ = [
    "BinaryCodes",
    "CodesPair",
    "DatasetPair",
    "PwcfModel",
    "RunConfig",
    "ShiftSpec",
    "Standardizer",
    "generate_synthetic_pair",
    "pack",
    "parse_config",
    "retrieve",
    "train",
    "unpack",
]
