"""LSTM caption generators adapted from a large source domain to a small target domain."""

__version__ = "0.1.0"
