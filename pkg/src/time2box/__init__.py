"""Temporal knowledge-base completion with box embeddings."""

__version__ = "0.1.0"
