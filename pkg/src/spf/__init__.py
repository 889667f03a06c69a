"""Privacy-preserving face anti-spoofing on facial skin patches."""

__version__ = "0.1.0"
