"""Whittle-index scheduling of energy/delay-constrained queues over fading channels."""

__version__ = "0.1.0"
