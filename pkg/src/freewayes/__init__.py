"""Cooperative freeway traffic control trained by evolution strategies."""
__version__ = "0.1.0"
