"""Self-iterative landmark regression with a landmark-attention network."""

__version__ = "0.1.0"
