"""Shifting-dense partition learning for cross-view retrieval, on a small numpy autodiff core."""

__version__ = "0.1.0"
