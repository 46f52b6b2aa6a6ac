"""Desk-scale toolkit for BatchNorm re-initialization and two-stage multimodal fusion tuning."""
__version__ = "0.1.0"
