"""Transductive dropout: MC-dropout uncertainty regularised with unlabelled target data."""

__version__ = "0.1.0"
