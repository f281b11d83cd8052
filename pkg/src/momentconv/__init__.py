"""Rotation/reflection-equivariant convolutional networks from moment kernels."""

__version__ = "0.1.0"
