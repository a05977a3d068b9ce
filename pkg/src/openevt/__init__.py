"""Extreme value statistics for open piecewise expanding interval maps."""

__version__ = "0.1.0"
