"""Sparse-keypoint displacement-embedding registration for 3D CT."""

__version__ = "0.1.0"
