"""Test-time domain adaptation through meta-learned batch-norm affine parameters."""

__version__ = "0.1.0"
