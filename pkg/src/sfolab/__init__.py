"""Spectral filtering operators on the Hilbert-matrix eigenbasis."""

__version__ = "0.1.0"
