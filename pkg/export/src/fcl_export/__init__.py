"""Offline export tooling for the fair-context adaptation engine.

Converts a dual-encoder checkpoint into the engine's portable artifacts: a
TorchScript vision graph, a TorchScript text graph that takes embedding-level
token inputs (so the learnable context stays an external variable), the
binary class-token table, and a checksummed manifest.
"""

__version__ = "0.1.0"

from .exporter import ExportError, export
from .models import DualEncoder, load_checkpoint, make_checkpoint

__all__ = ["DualEncoder", "ExportError", "export", "load_checkpoint",
           "make_checkpoint"]
