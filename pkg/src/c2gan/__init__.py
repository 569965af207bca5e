"""Cycle-in-cycle GAN for keypoint-guided image-to-image translation, at desk scale."""

__version__ = "0.1.0"
