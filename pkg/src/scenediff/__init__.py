"""Joint diffusion over object poses and Gaussian-scaffold shapes for single-view scenes."""

__version__ = "0.1.0"
