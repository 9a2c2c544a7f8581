"""Intrinsic image decomposition learned from procedural albedo and shading samples."""

__version__ = "0.1.0"
