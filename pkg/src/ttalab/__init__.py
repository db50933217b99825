"""Desk-scale test-time adaptation lab for a toy dual-encoder classifier."""

__version__ = "0.1.0"
