# aogdet/errors.py
"""
Exception hierarchy shared by every service module.

Library code raises these; the CLI turns them into a one-line diagnostic and a
non-zero exit status.
"""


class AogError(Exception):
    """Base class for all detector errors."""

    def __init__(self, message, **context):
        self.message = message
        self.context = context
        super().__init__(self.message)


# --- Input / decoding ---

class IoError(AogError):
    """A file could not be read or written."""


class FormatError(AogError):
    """Unsupported or corrupt encoding."""


class ConfigError(AogError, ValueError):
    """Invalid configuration value or config file."""


# --- Geometry ---

class ImageTooSmall(AogError):
    """The image admits no pyramid level with enough cells."""


class OutOfBounds(AogError):
    """A window does not fit inside the referenced grid."""


class LevelMismatch(AogError):
    """Two placements that must share a pyramid level do not."""


# --- Model ---

class InvalidAssignment(AogError):
    """A latent assignment does not match the graph structure."""


class DimensionMismatch(AogError):
    """A vector has the wrong length for the structure it targets."""


class VersionError(AogError):
    """Model file written by an unknown format version."""


class CorruptModel(AogError):
    """Model file is truncated or internally inconsistent."""


class LabelCollision(AogError):
    """Models being merged declare the same class label."""


# --- Training ---

class InsufficientData(AogError):
    """Not enough samples to initialize or train a model."""


class NonConvergence(AogError):
    """A solver hit its iteration cap before converging."""
