"""Patch-based anomaly localization for high-resolution board images.

A small convolutional autoencoder with a learned reconstruction gate runs on
half-stride patches; overlapping outputs are merged cell by cell and the
difference to the input becomes the anomaly map.
"""

__version__ = "0.1.0"
