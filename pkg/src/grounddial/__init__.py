"""Desk-scale visual dialog with prior/posterior attention grounding."""

__version__ = "0.1.0"
