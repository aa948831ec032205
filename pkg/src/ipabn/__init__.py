"""In-place activated BatchNorm kernels, memory strategies and verification harness."""

__version__ = "1.0.0"
