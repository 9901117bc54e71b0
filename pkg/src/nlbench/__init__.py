"""Label-noise benchmarking toolkit."""
__version__ = "0.1.0"
