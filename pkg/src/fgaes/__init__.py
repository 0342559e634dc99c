"""Fine-grained image aesthetic assessment toolkit."""

__version__ = "0.1.0"
