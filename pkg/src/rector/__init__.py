"""Flow correlation: synthetic traffic, windowed GRU encoders, IVF matching and evaluation."""

__version__ = "0.1.0"
