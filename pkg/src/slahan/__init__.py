"""Dependency-aware deletion-based sentence compression with look-ahead graph attention."""

__version__ = "0.1.0"
