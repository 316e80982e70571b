"""Voxel scans to spline level sets to stabilized immersed Stokes flow."""

__version__ = "0.1.0"
