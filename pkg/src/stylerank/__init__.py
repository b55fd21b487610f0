"""Visual similarity recommendation: small CNN feature extractors plus exact ball-tree ranking."""

__version__ = "0.1.0"
