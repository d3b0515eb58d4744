"""Confidence-based simultaneous translation on synthetic tasks."""

__version__ = "0.1.0"

BOS, EOS, PAD = 0, 1, 2
N_SPECIAL = 3
