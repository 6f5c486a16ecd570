"""Store-anchored attestation of sentience, location and uniqueness for social media accounts."""

__version__ = "0.1.0"
