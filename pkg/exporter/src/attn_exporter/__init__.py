"""Bridge tool: run a pre-trained encoder over passages and emit [CLS] attention."""

from .export import ExportJob, ExportReport, export_attention, read_passages

__version__ = "0.1.0"

__all__ = [
    "ExportJob",
    "ExportReport",
    "export_attention",
    "read_passages",
    "__version__",
]
