"""Desk-scale laboratory for probing the synthetic-to-real accuracy gap with layer transfer."""

__version__ = "0.1.0"
