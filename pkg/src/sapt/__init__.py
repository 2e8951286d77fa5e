"""Skeleton-assisted prompt transfer toolkit."""

__version__ = "0.1.0"
