"""Desk-scale multitask speech pipeline over a synthetic embedding world."""

__version__ = "0.1.0"
