"""Sequence-to-sequence training with oracle-sampled decoder contexts."""

__version__ = "0.1.0"
