"""Desk-scale multitask fine-tuning engine."""

__version__ = "0.1.0"
