"""Semantics-aware attention guidance for weakly supervised slide classification."""

__version__ = "0.1.0"
