"""Multilingual grapheme-to-phoneme conversion with Transformer ensembles and self-training."""

__version__ = "0.1.0"
