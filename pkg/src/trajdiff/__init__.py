"""Trajectory diffusion over point tracks: data, model, training and evaluation."""

__version__ = "0.1.0"
