"""Residual-stream diagnostics for retrieval-augmented generation in toy transformers."""

__version__ = "0.1.0"
