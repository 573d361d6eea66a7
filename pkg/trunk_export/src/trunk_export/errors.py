"""Exception types for the export tool."""


class TrunkExportError(Exception):
    """Base class for all exporter errors."""


class ExportError(TrunkExportError, ValueError):
    """The export request is invalid (unknown model, bad destination)."""


class GraphError(TrunkExportError, ValueError):
    """A graph definition violates its structural invariants."""


class DecodeError(TrunkExportError, RuntimeError):
    """An exported model file cannot be decoded."""


class VerificationError(TrunkExportError, RuntimeError):
    """Source and exported-graph activations disagree beyond tolerance."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
