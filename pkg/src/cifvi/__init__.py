"""Continuously-indexed flows for auxiliary variational inference."""

__version__ = "0.1.0"
