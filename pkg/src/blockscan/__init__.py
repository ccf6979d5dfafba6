"""Unsupervised anomaly detection over transaction call traces.

The pipeline: parse and flatten traces, tokenize them, train a masked
language model on benign traffic, then rank transactions by how often the
model fails to reconstruct masked tokens.
"""
from __future__ import annotations

__version__ = "0.1.0"
