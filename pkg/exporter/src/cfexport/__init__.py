"""Checkpoint and probe exporters for the cfmodel/1 toolkit formats."""

from .arch import build_module, build_template
from .export import ExportError, ExportSpec, export_model
from .probes import export_probes

__all__ = [
    "ExportError",
    "ExportSpec",
    "build_module",
    "build_template",
    "export_model",
    "export_probes",
]
