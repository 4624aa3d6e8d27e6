"""Inference-time unlearning by subspace steering, with a deterministic toy model."""

__version__ = "0.1.0"
