"""Pooling-strategy laboratory for human-vs-machine text classification."""

__version__ = "0.1.0"
