"""Topology-steered sampling of a latent diffusion model over 2D vector fields."""

__version__ = "0.1.0"
