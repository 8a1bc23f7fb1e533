"""Pose transformation GAN with pose-eliminating canonical features, at desk scale."""

__version__ = "0.1.0"
