"""Weight-space representation learning on small model zoos."""

__version__ = "0.1.0"
