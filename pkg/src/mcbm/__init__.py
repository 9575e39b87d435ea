"""Minimal concept bottleneck models and baselines at desk scale."""

__version__ = "0.1.0"
