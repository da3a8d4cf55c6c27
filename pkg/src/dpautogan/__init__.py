"""Differentially private autoencoder + GAN synthesis of mixed-type tabular data."""

__version__ = "0.1.0"
