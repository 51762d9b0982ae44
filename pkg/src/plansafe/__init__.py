"""Plan-safety monitoring workbench."""

__version__ = "0.1.0"
