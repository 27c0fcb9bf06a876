"""Differentiable 3D vector graphics: cubic Bézier scenes seen through perspective cameras."""

__version__ = "0.1.0"
