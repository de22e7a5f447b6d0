"""Secret-shared neural network inference with low-rank weights, truncation skipping and pipelined layers."""

from .ring import DEFAULT_CFG, FixedPointConfig, decode_fixed, encode_fixed

__version__ = "0.1.0"
__all__ = ["DEFAULT_CFG", "FixedPointConfig", "decode_fixed", "encode_fixed", "__version__"]
