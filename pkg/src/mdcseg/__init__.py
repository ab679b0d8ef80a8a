"""Noise-robust segmentation at desk scale: pixel-wise meta-reweighting of
noisy labels plus dynamic-center boundary refinement, with a verification
suite for the method's stability properties."""

__version__ = "0.1.0"
