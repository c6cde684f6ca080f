"""Fault injection orchestration and online fault classification."""

__version__ = "0.1.0"
