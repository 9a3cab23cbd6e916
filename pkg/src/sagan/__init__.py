"""Spatial-aware GAN for joint spatial and pixel-level domain adaptation."""
