"""Domain-generalized oriented object detection at desk scale.

Rotated-box geometry, a small reverse-mode autodiff engine, feature-level
style hallucination, a two-stage oriented detector with consistency losses,
synthetic domain-shifted data, and a rotated-IoU evaluator.
"""
__version__ = "0.1.0"
