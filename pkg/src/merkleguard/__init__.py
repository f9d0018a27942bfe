"""Detect and localize single-bias trojans in MLP checkpoints with Merkle trees."""

__version__ = "0.1.0"
