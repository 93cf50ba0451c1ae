"""Mask-conditioned cascaded diffusion for segmentation data enrichment."""

__version__ = "0.1.0"
