"""Selective state-space foundation model for MIMO-OFDM channel state information."""

__version__ = "0.1.0"
