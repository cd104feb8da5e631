"""Certify simple pricing mechanisms for two-dimensional screening problems."""

__version__ = "0.1.0"
