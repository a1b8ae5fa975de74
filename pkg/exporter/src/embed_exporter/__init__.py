"""Offline embedding exporter: runs a pretrained image encoder over a
dataset manifest and writes the vectors to an FEMB container."""

__version__ = "0.1.0"

from .export import ExportJob, export

__all__ = ["ExportJob", "export", "__version__"]
