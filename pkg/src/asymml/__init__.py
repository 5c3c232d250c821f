"""Asymmetric metric learning: train a small student embedding against a fixed teacher."""

from asymml.errors import ConfigurationError, DegenerateInputError, TrainingDiverged
from asymml.geometry import SimilarityMode, cosine_similarity, gem_pool, pair_similarity

__all__ = [
    "ConfigurationError",
    "DegenerateInputError",
    "SimilarityMode",
    "TrainingDiverged",
    "cosine_similarity",
    "gem_pool",
    "pair_similarity",
]

__version__ = "0.1.0"
