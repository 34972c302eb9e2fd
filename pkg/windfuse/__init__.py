"""Dual-stream wind hazard risk classification."""

from windfuse.version import __version__

__all__ = ["__version__"]
