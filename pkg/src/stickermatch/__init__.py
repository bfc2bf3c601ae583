"""Emotion- and intention-guided sticker response selection on a from-scratch autodiff engine."""

__version__ = "0.1.0"
