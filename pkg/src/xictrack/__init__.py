"""Self-supervised RGB-T tracking with cross-input consistency."""

__version__ = "0.1.0"
