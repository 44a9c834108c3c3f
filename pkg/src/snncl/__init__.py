"""Spiking-network continual learning with compressed latent replay."""

__version__ = "0.1.0"
