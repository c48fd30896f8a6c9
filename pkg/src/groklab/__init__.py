"""Grokking laboratory for prime-field arithmetic transformers."""

__version__ = "0.1.0"
