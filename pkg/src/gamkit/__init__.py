"""Gradient Activation Maps and baseline saliency methods for CNNs."""

__version__ = "0.1.0"
