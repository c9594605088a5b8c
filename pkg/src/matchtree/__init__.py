"""Matched observational studies over a hierarchy of exposure definitions."""

__version__ = "0.1.0"
