"""Context-graph reasoning toolkit."""
__version__ = "0.1.0"
