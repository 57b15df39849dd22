"""Causality-enhanced cross-domain recommendation, at desk scale."""

__version__ = "0.1.0"
