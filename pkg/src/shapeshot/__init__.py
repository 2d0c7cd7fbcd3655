"""Few-shot shape detection with query-position-aware support attention."""

__version__ = "0.1.0"
