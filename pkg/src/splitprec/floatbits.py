"""Bit-level encode/decode of binary floating-point formats.

Everything here is array-first: functions accept scalars or numpy arrays
and broadcast. Scalar inputs give numpy scalars back.

Split convention used throughout the package: a float32 value ``x`` is
stored as a ``high`` word in a narrow format plus ``k`` *extra* bits that
continue the high part's significand. Truncating the full-precision value
into (high, extra) is a round-toward-zero operation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "FloatFormat",
    "FP32",
    "FP16",
    "BF16",
    "FP8_E5M2",
    "FORMATS",
    "RoundMode",
    "ScalarSplit",
    "decode",
    "encode",
    "to_float",
    "ulp",
    "split_rtz",
    "split_stochastic",
    "split_nearest",
    "reconstruct",
    "round_nearest",
    "stochastic_round",
    "uniform",
    "max_extra_bits",
]


@dataclass(frozen=True)
class FloatFormat:
    """IEEE-754 style binary format: 1 sign bit, biased exponent, stored mantissa."""

    name: str
    exponent_bits: int
    mantissa_bits: int
    code: int = -1

    @property
    def total_bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def exponent_mask(self) -> int:
        return (1 << self.exponent_bits) - 1

    @property
    def mantissa_mask(self) -> int:
        return (1 << self.mantissa_bits) - 1

    @property
    def emin(self) -> int:
        """Unbiased exponent of the smallest normal number."""
        return 1 - self.bias

    @property
    def emax(self) -> int:
        return self.bias

    @property
    def max_finite(self) -> float:
        return float(np.ldexp(2.0 - 2.0 ** -self.mantissa_bits, self.emax))

    @property
    def min_subnormal(self) -> float:
        return float(np.ldexp(1.0, self.emin - self.mantissa_bits))

    @property
    def dtype(self) -> np.dtype:
        """Smallest unsigned dtype holding one encoded word."""
        return np.dtype({8: np.uint8, 16: np.uint16, 32: np.uint32}[self.total_bits])

    @property
    def nbytes(self) -> int:
        return self.total_bits // 8

    def __repr__(self) -> str:
        return f"FloatFormat({self.name}: e{self.exponent_bits}m{self.mantissa_bits})"


FP32 = FloatFormat("fp32", 8, 23, code=3)
FP16 = FloatFormat("fp16", 5, 10, code=0)
BF16 = FloatFormat("bf16", 8, 7, code=1)
# emulated: shares fp16's exponent range, keeps only the top 2 mantissa bits
FP8_E5M2 = FloatFormat("fp8e5m2", 5, 2, code=2)

FORMATS = {f.name: f for f in (FP32, FP16, BF16, FP8_E5M2)}


class RoundMode(enum.Enum):
    RTZ = "rtz"
    STOCHASTIC = "stochastic"
    # plain round-to-nearest-even cast; only meaningful with k = 0
    NEAREST = "nearest"


class ScalarSplit(NamedTuple):
    """(high word, extra bits, round-up flag). Fields may be arrays of one shape."""

    high_bits: np.ndarray
    extra_bits: np.ndarray
    round_flag: np.ndarray


def _unwrap(a):
    return a[()] if isinstance(a, np.ndarray) and a.ndim == 0 else a


def max_extra_bits(fmt: FloatFormat) -> int:
    return FP32.mantissa_bits - fmt.mantissa_bits


def _check_k(fmt: FloatFormat, k: int) -> None:
    if fmt.total_bits > 16:
        raise ValueError(f"{fmt.name} cannot be split; high part must be at most 16 bits")
    if not 0 <= k <= max_extra_bits(fmt):
        raise ValueError(f"k={k} out of range [0, {max_extra_bits(fmt)}] for {fmt.name}")


# ---------------------------------------------------------------------------
# field-level encode / decode


def decode(bits, fmt: FloatFormat):
    """Split encoded words into ``(sign, exponent, significand)``.

    ``exponent`` is the biased exponent and ``significand`` carries the
    implicit leading bit for normal numbers, so that

        x = (-1)**sign * significand * 2**(exponent - bias - mantissa_bits)

    Subnormals (and zero) come back with ``exponent = 1`` and no implicit
    bit, which keeps the formula valid. For the reserved all-ones exponent
    the significand is the raw mantissa field (0 for Inf, nonzero for NaN).
    """
    b = np.asarray(bits).astype(np.int64)
    if np.any((b < 0) | (b >> fmt.total_bits != 0)):
        raise ValueError(f"word does not fit in {fmt.total_bits} bits")
    m = fmt.mantissa_bits
    sign = (b >> (fmt.total_bits - 1)) & 1
    field = (b >> m) & fmt.exponent_mask
    frac = b & fmt.mantissa_mask
    normal = (field != 0) & (field != fmt.exponent_mask)
    exponent = np.where(field == 0, 1, field)
    significand = np.where(normal, frac | (1 << m), frac)
    return _unwrap(sign), _unwrap(exponent), _unwrap(significand)


def encode(sign, exponent, significand, fmt: FloatFormat):
    """Inverse of :func:`decode`. Raises ``ValueError`` on out-of-range fields."""
    s = np.asarray(sign).astype(np.int64)
    e = np.asarray(exponent).astype(np.int64)
    sig = np.asarray(significand).astype(np.int64)
    s, e, sig = np.broadcast_arrays(s, e, sig)
    m = fmt.mantissa_bits
    emask = fmt.exponent_mask
    implicit = 1 << m
    if np.any((s != 0) & (s != 1)):
        raise ValueError("sign must be 0 or 1")
    if np.any((e < 0) | (e > emask)):
        raise ValueError(f"exponent out of range [0, {emask}]")
    if np.any((sig < 0) | (sig >= 2 * implicit)):
        raise ValueError("significand out of range")
    finite = e != emask
    has_implicit = sig >= implicit
    if np.any(finite & (e == 0) & has_implicit):
        raise ValueError("exponent 0 is subnormal; significand must lack the implicit bit")
    if np.any(finite & (e > 1) & ~has_implicit):
        raise ValueError("unnormalized significand for a normal exponent")
    field = np.where(finite, np.where(has_implicit, e, 0), emask)
    frac = sig & fmt.mantissa_mask
    # reserved exponent: zero significand is Inf, anything else a NaN
    nan_frac = np.where(frac != 0, frac, 1 << (m - 1))
    frac = np.where(finite | (sig == 0), frac, nan_frac)
    word = (s << (fmt.total_bits - 1)) | (field << m) | frac
    return _unwrap(word.astype(fmt.dtype))


def to_float(bits, fmt: FloatFormat):
    """Decode words of ``fmt`` to float32 values (exact for every format here)."""
    sign, exponent, sig = (np.asarray(a) for a in decode(bits, fmt))
    special = exponent == fmt.exponent_mask
    mag = np.ldexp(sig.astype(np.float64), exponent - fmt.bias - fmt.mantissa_bits)
    mag = np.where(special, np.where(sig == 0, np.inf, np.nan), mag)
    return _unwrap(np.where(sign == 1, -mag, mag).astype(np.float32))


# ---------------------------------------------------------------------------
# rounding helpers


def _frexp_exponent(ax: np.ndarray) -> np.ndarray:
    """floor(log2(ax)) for ax > 0; an arbitrarily small value for 0."""
    _, ex = np.frexp(ax)
    return np.where(ax > 0, ex - 1, -10_000).astype(np.int64)


def ulp(x, fmt: FloatFormat):
    """Spacing of ``fmt`` at magnitude ``x`` (exponent clamped to the normal range)."""
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError("ulp is undefined for NaN/Inf")
    e = np.clip(_frexp_exponent(np.abs(x.astype(np.float64))), fmt.emin, fmt.emax)
    return _unwrap(np.ldexp(np.float32(1.0), (e - fmt.mantissa_bits).astype(np.int32)))


def round_nearest(x, fmt: FloatFormat):
    """Round float32 values to ``fmt`` with round-half-to-even; result as float32."""
    x = np.asarray(x, dtype=np.float32)
    ax = np.abs(x.astype(np.float64))
    finite = np.isfinite(ax)
    ax = np.where(finite, ax, 0.0)
    e = np.maximum(_frexp_exponent(ax), fmt.emin)
    q = e - fmt.mantissa_bits
    r = np.ldexp(np.rint(np.ldexp(ax, -q)), q)
    r = np.where(r > fmt.max_finite, np.inf, r)
    r = np.where(finite, r, np.abs(x.astype(np.float64)))
    return _unwrap(np.copysign(r, x).astype(np.float32))


_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def uniform(seed, index, counter=0, stream=0) -> np.ndarray:
    """Counter-based uniform draws in [0, 1), one per (seed, index, counter, stream).

    A splitmix64 hash chain; draws do not depend on evaluation order, so
    per-element randomness is reproducible under any chunking.
    """
    with np.errstate(over="ignore"):
        seed, index, counter, stream = (
            np.asarray(a).astype(np.uint64) for a in (seed, index, counter, stream)
        )
        z = _mix64(seed + _GAMMA)
        z = _mix64(z ^ (stream * _M2 + _GAMMA))
        z = _mix64(z + counter * _GAMMA)
        z = _mix64(z ^ (index * _M1))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


# ---------------------------------------------------------------------------
# split / reconstruct


def _split_parts(x: np.ndarray, fmt: FloatFormat, k: int):
    ax = np.abs(x.astype(np.float64))
    nan = np.isnan(ax)
    over = np.isinf(ax)
    ax = np.where(nan | over, 0.0, ax)
    e = np.maximum(_frexp_exponent(ax), fmt.emin)
    over |= e > fmt.emax
    e = np.where(over, fmt.emax, e)
    ax = np.where(over, 0.0, ax)
    # N = |x| truncated to the extended significand; exact in float64
    scaled = np.ldexp(ax, -(e - fmt.mantissa_bits - k))
    n = np.trunc(scaled).astype(np.int64)
    resid = scaled - n
    return e, n, resid, nan, over


def split_rtz(x, fmt: FloatFormat, k: int) -> ScalarSplit:
    """Truncate float32 ``x`` into a ``fmt`` high word plus ``k`` extra bits.

    Magnitudes beyond the largest extended-finite value saturate to
    max-finite with all-ones extras; NaN gives a quiet-NaN high word.
    """
    _check_k(fmt, k)
    x = np.asarray(x, dtype=np.float32)
    high, extra, _, _ = _split_core(x, fmt, k)
    return ScalarSplit(_unwrap(high), _unwrap(extra), _unwrap(np.zeros(x.shape, bool)))


def _split_core(x: np.ndarray, fmt: FloatFormat, k: int):
    m = fmt.mantissa_bits
    e, n, resid, nan, over = _split_parts(x, fmt, k)
    kmask = (1 << k) - 1
    hsig = n >> k
    extra = n & kmask
    field = np.where(hsig >> m != 0, e + fmt.bias, 0)
    frac = hsig & fmt.mantissa_mask
    field = np.where(over, fmt.exponent_mask - 1, field)
    frac = np.where(over, fmt.mantissa_mask, frac)
    extra = np.where(over, kmask, extra)
    field = np.where(nan, fmt.exponent_mask, field)
    frac = np.where(nan, 1 << (m - 1), frac)
    extra = np.where(nan, 0, extra)
    sign = np.signbit(x).astype(np.int64)
    high = (sign << (fmt.total_bits - 1)) | (field << m) | frac
    # fraction of one high-part ulp sitting below the high part
    frac_below = (extra + resid) / float(1 << k)
    frac_below = np.where(nan | over, 0.0, frac_below)
    return high.astype(fmt.dtype), extra.astype(np.uint32), frac_below, nan | over


def split_stochastic(x, fmt: FloatFormat, k: int, seed, index=None, counter=0) -> ScalarSplit:
    """Like :func:`split_rtz`, but the high word is stochastically rounded.

    The high part is bumped up one ulp with probability equal to the whole
    residual below it (in high-part ulps), which makes it unbiased. The
    extra bits are always the truncated continuation, and ``round_flag``
    records the bump so :func:`reconstruct` can undo it exactly.
    ``index`` keys the random draw per element (defaults to flat position).
    """
    _check_k(fmt, k)
    x = np.asarray(x, dtype=np.float32)
    if index is None:
        index = np.arange(x.size, dtype=np.uint64).reshape(x.shape)
    high, extra, p, special = _split_core(x, fmt, k)
    u = uniform(seed, index, counter, stream=0)
    signbit = np.uint32(1 << (fmt.total_bits - 1))
    mag = high.astype(np.uint32) & ~signbit
    max_mag = ((fmt.exponent_mask - 1) << fmt.mantissa_bits) | fmt.mantissa_mask
    flag = (u < p) & ~special & (mag < max_mag)
    high = np.where(flag, high + 1, high).astype(fmt.dtype)
    return ScalarSplit(_unwrap(high), _unwrap(extra), _unwrap(flag))


def split_nearest(x, fmt: FloatFormat) -> ScalarSplit:
    """Round-to-nearest-even cast with no extra bits (the vanilla low-precision store)."""
    x = np.asarray(x, dtype=np.float32)
    return split_rtz(round_nearest(x, fmt), fmt, 0)


def reconstruct(s: ScalarSplit, fmt: FloatFormat, k: int):
    """Undo the round-up flag, then append the extra bits to the high significand."""
    _check_k(fmt, k)
    high = np.asarray(s.high_bits).astype(np.int64)
    extra = np.asarray(s.extra_bits).astype(np.int64)
    flag = np.asarray(s.round_flag, dtype=bool)
    signbit = 1 << (fmt.total_bits - 1)
    high = np.where(flag, (high & signbit) | ((high & ~signbit) - 1), high)
    sign, exponent, sig = (np.asarray(a) for a in decode(high, fmt))
    special = exponent == fmt.exponent_mask
    n = (sig << k) | extra
    mag = np.ldexp(n.astype(np.float64), exponent - fmt.bias - fmt.mantissa_bits - k)
    mag = np.where(special, np.where(sig == 0, np.inf, np.nan), mag)
    return _unwrap(np.where(sign == 1, -mag, mag).astype(np.float32))


def stochastic_round(x, fmt: FloatFormat, k: int, seed, index=None, counter=0, stream=1):
    """Round float32 ``x`` to ``fmt.mantissa_bits + k`` significand bits stochastically.

    Exponent range follows ``fmt`` (subnormal quantum below it). Values
    already on the grid, NaN, and out-of-range magnitudes pass through.
    """
    _check_k(fmt, k)
    x = np.asarray(x, dtype=np.float32)
    if index is None:
        index = np.arange(x.size, dtype=np.uint64).reshape(x.shape)
    e, n, resid, nan, over = _split_parts(x, fmt, k)
    u = uniform(seed, index, counter, stream=stream)
    n = n + ((u < resid) & ~nan & ~over)
    q = e - fmt.mantissa_bits - k
    out = np.copysign(np.ldexp(n.astype(np.float64), q), x).astype(np.float32)
    return _unwrap(np.where(nan | over, x, out))
