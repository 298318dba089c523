"""Latent space roadmaps for visual action planning, with augmentation,
shortcut connection and targeted exploration."""

__version__ = "0.1.0"
