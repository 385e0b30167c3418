"""Conflict-aware client selection for multi-server federated learning."""

__version__ = "0.1.0"
