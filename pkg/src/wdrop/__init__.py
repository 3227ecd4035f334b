"""Few-shot learning with dropout on transferable backbone weights."""

__version__ = "0.1.0"
