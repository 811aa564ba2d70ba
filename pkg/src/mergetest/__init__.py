"""Interaction-aware adaptive testing of highway-merge policies."""

__version__ = "0.1.0"
