"""Federated learning simulator with per-client mixtures of local and global models."""

__version__ = "0.1.0"
