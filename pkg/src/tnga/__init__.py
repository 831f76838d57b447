"""Temporal network grafting: spiking-cochlea simulation and state-matching transfer."""

__version__ = "0.1.0"
