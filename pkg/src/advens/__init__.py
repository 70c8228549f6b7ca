"""Adversarial training of ensembles treated as a single model."""

__version__ = "0.1.0"
