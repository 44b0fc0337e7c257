"""Supervision targets, losses and a toy training loop for depth-and-detection pre-training."""

__version__ = "0.1.0"
