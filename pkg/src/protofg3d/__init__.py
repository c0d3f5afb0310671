"""Prototype-based classification head with entropic-OT online clustering."""

__version__ = "0.1.0"
