"""Text reconstruction from dense embeddings by iterative, feedback-driven correction."""

__version__ = "0.1.0"
