import numpy as np


def random_f32(rng, n, lo_exp=-14, hi_exp=15):
    """Random float32 values with unbiased exponent in [lo_exp, hi_exp] and random sign/mantissa."""
    exp = rng.integers(lo_exp, hi_exp + 1, n)
    mant = rng.integers(0, 1 << 23, n)
    sign = rng.integers(0, 2, n)
    words = (sign << 31) | ((exp + 127) << 23) | mant
    return words.astype(np.uint32).view(np.float32)


def random_finite_f32(rng, n):
    words = rng.integers(0, 1 << 32, n, dtype=np.uint64).astype(np.uint32)
    x = words.view(np.float32)
    return x[np.isfinite(x)]
