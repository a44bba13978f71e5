"""Two-sample domain-shift detection, equalisation and feature attribution."""

__version__ = "0.1.0"
