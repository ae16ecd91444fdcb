"""Vessel-coupled losses, SLIC superpixels, metrics and a desk-scale trainer
for retinal artery/vein classification experiments."""

__version__ = "0.1.0"
