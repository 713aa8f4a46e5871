"""Invertible consistency distillation with cycle fine-tuning and guided editing, at toy scale."""

__version__ = "0.1.0"
