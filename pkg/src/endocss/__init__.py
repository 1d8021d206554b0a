"""Continual semantic segmentation with entropy-filtered mini-batch pseudo-replay."""

__version__ = "0.1.0"
