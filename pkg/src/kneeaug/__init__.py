"""Knee radiograph augmentation study: preprocessing, base and online augmentation,
a small CNN engine, Grad-CAM and evaluation metrics."""

__version__ = "0.1.0"
