"""Adversarial-robustness harness for visual object trackers."""

__version__ = "0.1.0"
