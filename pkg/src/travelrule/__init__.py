"""Bilateral travel-rule information exchange between VASPs on dual-signed channel ledgers."""

__version__ = "0.1.0"
