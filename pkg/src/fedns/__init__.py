"""Federated-learning simulator with gradient-norm noisy-client sifting."""

__version__ = "0.1.0"
