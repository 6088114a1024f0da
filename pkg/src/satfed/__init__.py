"""Desk-scale simulator for federated mixture-of-experts training over an
intermittent satellite uplink."""

__version__ = "0.1.0"
