"""Transformer language-model training with Q-learning driven dynamic layer tying."""

__version__ = "0.1.0"
