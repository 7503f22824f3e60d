"""Hybrid CTC + masked-LM speech encoder-decoder with a class-attention intent head."""

__version__ = "0.1.0"
