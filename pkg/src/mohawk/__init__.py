"""Transformer -> SSM distillation at desk scale, with structured matrix-mixer projections."""

__version__ = "0.1.0"
