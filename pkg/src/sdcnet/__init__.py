"""Unsupervised domain adaptation for band-power EEG features."""

__version__ = "0.1.0"
