"""Desk-scale closed-loop driving laboratory."""

__version__ = "0.1.0"
