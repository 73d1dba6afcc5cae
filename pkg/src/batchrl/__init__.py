"""Offline (batch) reinforcement learning: data prep, training, policy evaluation and serving."""

__version__ = "0.1.0"
