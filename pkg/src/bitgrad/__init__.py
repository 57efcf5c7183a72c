"""bitgrad: 1-bit neural network training with pluggable gradient estimators
and an XNOR-popcount deployment path."""

__version__ = "0.1.0"
