"""Adversarial imitation learning for desk-scale dialogue generation."""

__version__ = "0.1.0"
