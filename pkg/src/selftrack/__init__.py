"""Self-supervised test-time-trained point tracker for a single video."""

__version__ = "0.1.0"
