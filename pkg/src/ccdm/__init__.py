"""Conditional categorical diffusion for stochastic label-map generation."""

__version__ = "0.1.0"
