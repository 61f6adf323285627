"""Maneuver-aware neighbor pooling for highway trajectory prediction."""

__version__ = "0.1.0"
