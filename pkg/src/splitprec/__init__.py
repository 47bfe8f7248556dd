"""Split-precision training: 16-bit parameters plus packed extra mantissa bits."""

from .floatbits import BF16, FP8_E5M2, FP16, FP32, FloatFormat, RoundMode

__version__ = "0.1.0"
