"""Probabilistic software modeling: per-executable conditional flows learned from runtime traces."""

__version__ = "0.1.0"
