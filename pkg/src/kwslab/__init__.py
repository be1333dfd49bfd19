"""Keyword spotting with latency-controlled max-pooling losses."""

__version__ = "0.1.0"
