"""Target-attentive graph neural networks for session-based recommendation."""

__version__ = "0.1.0"
