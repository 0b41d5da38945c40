"""Exception hierarchy shared across the package."""


class CmilError(Exception):
    """Base class for all package errors."""


class ConfigError(CmilError):
    """Invalid or inconsistent configuration."""


class FormatError(CmilError):
    """Malformed on-disk file: bad magic, version, truncation, bad manifest."""


class ShapeError(CmilError):
    """Tensor or model shape mismatch."""


class DataValidationError(CmilError):
    """Dataset-level inconsistency (split collisions, label problems)."""


class DegenerateEmbeddingError(CmilError):
    """A row that cannot be normalized (zero or non-finite norm)."""


class TrainingDivergedError(CmilError):
    """Loss or gradients became non-finite during optimization."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
