"""Symmetric encryption by training a small language model to memorize a
message inside a secret key-derived subspace, plus an empirical
chosen-plaintext indistinguishability test bench."""

__version__ = "0.1.0"
