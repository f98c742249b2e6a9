"""Diverse rare-sample generation by constrained multi-start latent optimization."""

__version__ = "0.1.0"
