"""Few-shot taskset generation with controlled train/test divergence."""

__version__ = "0.1.0"
