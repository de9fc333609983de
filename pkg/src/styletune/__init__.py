"""Desk-scale style tuning for a miniature masked generative image transformer."""

__version__ = "0.1.0"
