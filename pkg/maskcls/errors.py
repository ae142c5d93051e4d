"""
Exception hierarchy for maskcls.

Input problems derive from ValueError so callers that already catch
ValueError keep working.
"""

from typing import List, Optional


class MaskClsError(Exception):
    """Base class for every error raised by maskcls."""


class ShapeError(MaskClsError, ValueError):
    """Operand shapes do not conform to an operation's shape rule."""


class DomainError(MaskClsError, ValueError):
    """An operation was evaluated outside its numeric domain."""


class ConfigError(MaskClsError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class MatchingError(MaskClsError, ValueError):
    """A matcher was asked for an assignment it cannot produce."""


class DatasetError(MaskClsError, ValueError):
    """An on-disk dataset is malformed or fails its checksums."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{message} ({path})" if path else message)


class CheckpointError(MaskClsError, ValueError):
    """A checkpoint container is malformed or fails its checksum."""


class GraphError(MaskClsError, RuntimeError):
    """The recorded computation graph cannot be differentiated."""


class TrainingError(MaskClsError, RuntimeError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message: str, iteration: int = -1,
                 batch_indices: Optional[List[int]] = None):
        self.iteration = iteration
        self.batch_indices = list(batch_indices or [])
        super().__init__(message)
