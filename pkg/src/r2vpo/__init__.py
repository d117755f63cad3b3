"""Ratio-variance regularized policy optimization on tabular categorical policies."""

__version__ = "0.1.0"
