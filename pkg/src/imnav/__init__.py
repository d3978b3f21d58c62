"""Desk-scale VLN lab: landmark imaginations injected into a small cross-modal agent."""

__version__ = "0.1.0"
