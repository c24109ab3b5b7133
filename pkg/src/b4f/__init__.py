"""Vehicular forensics: signed records, hash ledger, BFT consensus, investigation."""

__version__ = "0.1.0"
