"""Train, compile and run binary/ternary multilayer perceptrons with integer thresholds."""

__version__ = "0.1.0"
