"""Guided diffusion with timestep-routed, parameter-efficient guidance experts."""

__version__ = "0.1.0"
