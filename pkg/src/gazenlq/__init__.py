"""Gaze-augmented natural-language temporal grounding at desk scale."""

__version__ = "0.1.0"
