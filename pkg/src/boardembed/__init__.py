"""Board-conditioned graph embeddings for low-shot component classification."""

__version__ = "0.1.0"
