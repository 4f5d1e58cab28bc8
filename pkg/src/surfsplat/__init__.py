"""Robust Gaussian-surfel surface reconstruction on the CPU.

Differentiable surfel splatting, multi-view feature-consistency distractor
masking, contribution-based pruning, NCC-weighted multi-view optimization,
plus a synthetic distractor benchmark and evaluation metrics.
"""

__version__ = "0.1.0"
