"""Desk-scale differentiable search of adversarially robust cell architectures."""

__version__ = "0.1.0"
