"""Spatial relation maps over uncertainty annotated maps."""

__version__ = "0.1.0"
