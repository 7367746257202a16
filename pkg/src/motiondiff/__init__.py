"""Conditional denoising diffusion for audio-driven motion synthesis."""

__version__ = "0.1.0"
