"""Behavior-switching imitation learning on a deterministic 2D planar-arm world."""

__version__ = "0.1.0"
