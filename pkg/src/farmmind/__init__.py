"""Reasoning-query driven refinement of farmland segmentation masks."""

__version__ = "0.1.0"
