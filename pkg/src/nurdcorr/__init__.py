"""Cross-attention NURD correction for endoscopic OCT B-scan sequences."""

__version__ = "0.1.0"
