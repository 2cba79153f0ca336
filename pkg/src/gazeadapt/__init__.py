"""Unsupervised adversarial feature adaptation for appearance-based 3D gaze regression."""

__version__ = "0.1.0"
