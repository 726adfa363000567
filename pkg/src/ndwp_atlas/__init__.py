"""Unsupervised atlas of driven Floquet states: simulate, image, embed, cluster, validate."""
__version__ = "0.1.0"
