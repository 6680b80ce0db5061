"""Sliced radio access network simulator with per-BS learning agents."""

__version__ = "0.1.0"
