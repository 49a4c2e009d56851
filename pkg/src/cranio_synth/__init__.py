"""Volumetric generative augmentation of paired defective-skull / defect voxel data."""

__version__ = "0.1.0"
