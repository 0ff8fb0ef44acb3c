"""Hearing-assistance toolkit: spectrogram CNN alerts, STT benchmarking and a simulated caption display."""

__version__ = "0.1.0"
