"""drmkit: rendering-model inference, learning and relaxation at desk scale."""
from .errors import (CorruptFileError, DRMError, EnumerationTooLarge, NumericalError,
                     PersistenceError, SchemaError, ShapeError, ValidationError,
                     VersionMismatchError)
from .model import (DeepLevel, DeepRM, EvoDRM, NaturalParams, RenderingPath, ShallowRM,
                    collapse, to_natural, validate)

__version__ = "0.1.0"

__all__ = [
    "CorruptFileError", "DRMError", "EnumerationTooLarge", "NumericalError", "PersistenceError",
    "SchemaError", "ShapeError", "ValidationError", "VersionMismatchError",
    "DeepLevel", "DeepRM", "EvoDRM", "NaturalParams", "RenderingPath", "ShallowRM",
    "collapse", "to_natural", "validate",
]
