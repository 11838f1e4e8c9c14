"""Depth-conditioned score distillation of voxel radiance fields at desk scale."""

__version__ = "0.1.0"
