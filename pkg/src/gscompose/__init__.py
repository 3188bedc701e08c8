"""Compositional text-to-video with 3D Gaussian scenes and objects.

The pipeline plans object paths with a director model, lifts them into the
scene, refines placements against a score provider and renders frames with a
CPU tile rasterizer.
"""
from .core import Camera, GaussianCloud, RigidTransform
from .rasterizer import rasterize, rasterize_reference

__version__ = "0.1.0"
__all__ = ["Camera", "GaussianCloud", "RigidTransform", "rasterize", "rasterize_reference"]
