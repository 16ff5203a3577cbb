"""Latent planning with a decoupled planner and decoder on a small transformer."""

__version__ = "0.1.0"
