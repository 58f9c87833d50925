"""WeightAlign: activation normalization by re-parameterizing filter weights."""

__version__ = "0.1.0"
