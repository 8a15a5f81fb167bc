"""Multi-prior hierarchical Mamba network for single-image deraining."""

__version__ = "0.1.0"
