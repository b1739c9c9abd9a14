"""Two-stream hierarchical transformer for local feature matching."""

__version__ = "0.1.0"
