"""embed-export: turn text corpora into prefrank feature files."""

from .exporter import ExportError, ExportSpec, export, load_word_vectors

__all__ = ["ExportError", "ExportSpec", "export", "load_word_vectors"]

__version__ = "0.1.0"
