"""Multi-level knowledge distillation for zero-shot human-object interaction detection."""

__version__ = "0.1.0"
