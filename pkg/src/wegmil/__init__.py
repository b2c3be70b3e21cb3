"""Explainable multimodal MIL over cell graphs and patch embeddings."""

from wegmil.errors import (
    ConfigError,
    DataError,
    DomainError,
    IoError,
    NonFiniteError,
    ParseError,
    ShapeError,
    StateError,
    ValidationError,
    WegmilError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DomainError",
    "IoError",
    "NonFiniteError",
    "ParseError",
    "ShapeError",
    "StateError",
    "ValidationError",
    "WegmilError",
]
