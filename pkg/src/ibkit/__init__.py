"""Information-theoretic analysis tools for small neural networks."""

__version__ = "0.1.0"
