"""Volumetric environment representation for vision-language navigation.

Synthetic scenes, ground-truth annotation, a forward-only volume encoder,
a navigation policy over volume states and episodic memory, a simulator
and the standard navigation and 3D perception metrics.
"""

__version__ = "0.1.0"
