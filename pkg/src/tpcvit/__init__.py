"""Vision transformer with adaptive per-token halting."""

__version__ = "0.1.0"
