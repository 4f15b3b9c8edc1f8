"""Adaptive multi-teacher single-student distillation at desk scale."""

__version__ = "0.1.0"
