"""Occlusion-robust face embeddings with dynamically decoded feature masks."""

__version__ = "0.1.0"
