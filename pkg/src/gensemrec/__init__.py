"""Generative recommendation with judge-guided semantic rewards and asymmetric advantage fusion."""

__version__ = "0.1.0"
