"""Semantic line detection: exact line geometry, a small detector with mirror attention,
pairwise ranking and matching heads, selection, and evaluation curves."""

__version__ = "0.1.0"
