"""Diffusion posterior sampling for 3D point-cloud reconstruction."""
