"""Dual-stage parameter-efficient fine-tuning for text-guided video editing."""

__version__ = "0.1.0"
