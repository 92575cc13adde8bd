"""Constraint-aware flow matching on a small reverse-mode autodiff core."""

__version__ = "0.1.0"
