"""Exception types shared across the toolkit."""


class CervifuseError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(CervifuseError, ValueError):
    """Tensor shapes do not agree with the operation's contract."""


class BatchTooSmallError(CervifuseError, ValueError):
    """Batch statistics requested on a batch with fewer than two rows."""


class InvalidLabelError(CervifuseError, ValueError):
    """A label is outside the class range or a label row is not one-hot."""


class InvalidParameterError(CervifuseError, ValueError):
    """An operation parameter is outside its valid range."""


class StateError(CervifuseError, RuntimeError):
    """An operation was called before its required predecessor."""


class DivergenceError(CervifuseError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class UnmappedLabelError(CervifuseError, ValueError):
    """A raw label directory has no entry in the active class scheme."""


class StratificationError(CervifuseError, ValueError):
    """A class is too small to be split at the requested fractions."""


class ManifestError(CervifuseError, ValueError):
    """A manifest file is malformed or violates an invariant."""


class AlignmentError(CervifuseError, ValueError):
    """Feature matrices do not share row count or sample order."""


class ComparisonError(CervifuseError, ValueError):
    """Runs with different class schemes cannot be compared."""


class TrunkLoadError(CervifuseError, RuntimeError):
    """An interchange trunk file or its sidecar manifest cannot be loaded."""


class InferenceError(CervifuseError, RuntimeError):
    """A trunk produced output inconsistent with its declared contract."""


class ArtifactError(CervifuseError, RuntimeError):
    """A pipeline stage artifact is missing or belongs to another config."""

    def __init__(self, message: str, producer: str | None = None):
        super().__init__(message)
        self.producer = producer


class ConfigError(CervifuseError, ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, message: str, field: str | None = None):
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field
