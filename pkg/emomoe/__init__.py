"""Gated two-expert visual projector, key-frame capture and staged LoRA training at toy scale."""

__version__ = "0.1.0"
