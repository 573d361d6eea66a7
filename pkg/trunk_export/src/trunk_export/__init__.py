"""Exporter producing interchange trunk files plus preprocessing manifests."""

from .errors import (
    DecodeError,
    ExportError,
    GraphError,
    TrunkExportError,
    VerificationError,
)
from .export import MANIFEST_SCHEMA, SUPPORTED_MODELS, export
from .verify import VerifyReport, verify

__all__ = [
    "DecodeError",
    "ExportError",
    "GraphError",
    "MANIFEST_SCHEMA",
    "SUPPORTED_MODELS",
    "TrunkExportError",
    "VerificationError",
    "VerifyReport",
    "export",
    "verify",
]
