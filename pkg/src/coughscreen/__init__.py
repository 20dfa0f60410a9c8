"""Cough-based screening from audio: preprocessing, a small CNN with optional
contextual attention, cross-validated training and evaluation."""

__version__ = "0.1.0"
