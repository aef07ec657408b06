"""Example difficulty estimation with Variance of Gradients (VoG) over training checkpoints."""

__version__ = "0.1.0"
