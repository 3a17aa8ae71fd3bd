"""Image-derived outcomes for single-participant crossover trials.

Autoencoder embeddings of trial photographs are reduced to a first
principal-component score per image and tested for an intervention
effect participant by participant.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, FormatError, Nof1Error, NumericError, UsageError, ValidationError

__all__ = [
    "__version__",
    "ConfigError",
    "DataError",
    "FormatError",
    "Nof1Error",
    "NumericError",
    "UsageError",
    "ValidationError",
]
