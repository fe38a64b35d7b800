"""Open-set 3D object retrieval core: adapted dual encoder, contrastive
training against class-description embeddings, textual-visual fusion and
retrieval evaluation."""

from dac_retrieval.errors import (
    ConfigError,
    DacError,
    DataError,
    DegenerateVectorError,
    FormatError,
    ShapeError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DacError",
    "DataError",
    "DegenerateVectorError",
    "FormatError",
    "ShapeError",
    "UsageError",
]
