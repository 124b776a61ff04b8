"""
Exception types raised across the toolkit.
"""

from typing import Dict, Optional


class FSSDError(Exception):
    """Base class for every error raised by the toolkit."""


class DimensionError(FSSDError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FSSDError, FloatingPointError):
    """A forward operation produced NaN or Inf."""


class ConfigError(FSSDError, ValueError):
    """Invalid configuration values."""


class ShapeGenerationError(FSSDError):
    """A shape could not be rendered with valid parameters."""


class EpisodeError(FSSDError, ValueError):
    """A split cannot supply the requested episode."""


class DescriptorError(FSSDError, ValueError):
    """A classical descriptor cannot be computed for a mask."""


class CheckpointError(FSSDError):
    """A checkpoint is unreadable or does not match the model."""


class DatasetNotFoundError(FSSDError):
    """The dataset tree or its manifest is missing."""


class TrainingDivergedError(FSSDError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
