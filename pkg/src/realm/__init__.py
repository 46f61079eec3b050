"""Realness scoring and dense realness mapping for AI-generated images."""

__version__ = "0.1.0"

from .dream import DreamConfig, RealnessMap, compute_realness_map
from .embedding import EmbeddingVector, MockFieldBackend, cosine_similarity, get_backend
from .errors import (BackendError, ConfigurationError, InvalidInputError, RealmError, SchemaError,
                     TrainingAborted)
from .metrics import EvalReport, plcc, srocc

__all__ = [
    "BackendError", "ConfigurationError", "DreamConfig", "EmbeddingVector", "EvalReport",
    "InvalidInputError", "MockFieldBackend", "RealmError", "RealnessMap", "SchemaError",
    "TrainingAborted", "compute_realness_map", "cosine_similarity", "get_backend", "plcc", "srocc",
]
