"""Tensor-level split-precision storage.

A :class:`SplitTensor` keeps each element as a narrow high word (fp16,
bf16 or emulated fp8) plus ``k`` packed extra bits. In stochastic mode
every entry carries one more bit on top: the round-up flag.

Updates go through :meth:`SplitTensor.apply_update`, which reconstructs
a few blocks at a time to float32, applies an elementwise kernel and
re-splits, so no full-size float32 copy of the parameter ever exists.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Callable

import numpy as np

from .floatbits import (
    BF16,
    FP8_E5M2,
    FP16,
    FloatFormat,
    RoundMode,
    ScalarSplit,
    _check_k,
    reconstruct,
    round_nearest,
    split_nearest,
    split_rtz,
    split_stochastic,
    stochastic_round,
    to_float,
)
from .packer import BLOCK, PackedBitBuffer

__all__ = [
    "SplitTensor",
    "MasterTensor",
    "CheckpointError",
    "encode_values",
    "resplit",
    "decode_values",
    "save",
    "load",
]

# elements handled per apply_update chunk; a whole number of packer blocks
CHUNK_BLOCKS = 1024

Kernel = Callable[..., np.ndarray]


def entry_width(k: int, mode: RoundMode) -> int:
    return k + (mode is RoundMode.STOCHASTIC)


def encode_values(values, fmt, k, mode, seed=0, index=None, counter=0, update=False):
    """Split float32 ``values`` into (high words, packed-entry values).

    With ``update=True`` in stochastic mode the value is first rounded
    stochastically to the stored precision (``fmt`` mantissa + k bits),
    so repeated updates do not drift the way truncation does.
    """
    values = np.asarray(values, dtype=np.float32)
    if mode is RoundMode.RTZ:
        s = split_rtz(values, fmt, k)
        return np.asarray(s.high_bits), np.asarray(s.extra_bits)
    if mode is RoundMode.NEAREST:
        s = split_nearest(values, fmt)
        return np.asarray(s.high_bits), np.asarray(s.extra_bits)
    if update:
        values = stochastic_round(values, fmt, k, seed, index, counter, stream=1)
    s = split_stochastic(values, fmt, k, seed, index, counter)
    entries = np.asarray(s.extra_bits) | (np.asarray(s.round_flag, dtype=np.uint32) << np.uint32(k))
    return np.asarray(s.high_bits), entries


def resplit(old, new, old_highs, old_entries, fmt, k, mode, seed, index, counter):
    """Encode updated values; elements whose value is bitwise unchanged keep their encoding."""
    highs, entries = encode_values(new, fmt, k, mode, seed, index, counter, update=True)
    if mode is RoundMode.STOCHASTIC:
        same = old.view(np.uint32) == new.view(np.uint32)
        highs = np.where(same, old_highs, highs)
        entries = np.where(same, old_entries, entries)
    return highs.astype(fmt.dtype), entries


def decode_values(highs, entries, fmt, k, mode) -> np.ndarray:
    entries = np.asarray(entries, dtype=np.uint32)
    if mode is RoundMode.STOCHASTIC:
        flag = (entries >> np.uint32(k)) & np.uint32(1)
        extra = entries & np.uint32((1 << k) - 1)
    else:
        flag = np.zeros(entries.shape, dtype=bool)
        extra = entries
    return np.asarray(reconstruct(ScalarSplit(highs, extra, flag.astype(bool)), fmt, k))


class SplitTensor:
    """Parameter tensor stored as (high words, packed extra bits).

    ``counter`` counts updates; together with ``seed`` and the element
    index it keys the random draws of stochastic mode.
    """

    def __init__(
        self,
        fmt: FloatFormat,
        k: int,
        mode: RoundMode,
        shape: tuple[int, ...],
        highs: np.ndarray,
        extras: PackedBitBuffer | None,
        seed: int = 0,
        counter: int = 0,
        name: str | None = None,
    ):
        _check_k(fmt, k)
        if mode is RoundMode.NEAREST and k != 0:
            raise ValueError("round-to-nearest storage has no extra bits; use k=0")
        size = int(np.prod(shape, dtype=np.int64))
        width = entry_width(k, mode)
        if highs.shape != (size,) or highs.dtype != fmt.dtype:
            raise ValueError("highs must be a flat array of the format's word type")
        if (extras is None) != (width == 0):
            raise ValueError("extras buffer does not match the entry width")
        if extras is not None and (extras.k != width or len(extras) != size):
            raise ValueError("extras buffer has the wrong width or length")
        self.fmt = fmt
        self.k = k
        self.mode = mode
        self.shape = tuple(int(d) for d in shape)
        self.highs = highs
        self.extras = extras
        self.seed = int(seed)
        self.counter = int(counter)
        self.name = name

    # -- construction -------------------------------------------------------

    @classmethod
    def from_f32(
        cls,
        values,
        fmt: FloatFormat = FP16,
        k: int = 13,
        mode: RoundMode = RoundMode.RTZ,
        seed: int = 0,
        name: str | None = None,
    ) -> SplitTensor:
        mode = RoundMode(mode)
        values = np.asarray(values, dtype=np.float32)
        _check_k(fmt, k)
        flat = values.reshape(-1)
        highs, entries = encode_values(flat, fmt, k, mode, seed, np.arange(flat.size), 0)
        width = entry_width(k, mode)
        extras = PackedBitBuffer.from_values(entries, width) if width else None
        return cls(fmt, k, mode, values.shape, highs.astype(fmt.dtype), extras, seed, 0, name)

    @classmethod
    def zeros(cls, shape, fmt=FP16, k=13, mode=RoundMode.RTZ, seed=0, name=None) -> SplitTensor:
        return cls.from_f32(np.zeros(shape, np.float32), fmt, k, mode, seed, name)

    # -- basic properties -----------------------------------------------

    @property
    def size(self) -> int:
        return self.highs.size

    @property
    def width(self) -> int:
        return entry_width(self.k, self.mode)

    @property
    def high_nbytes(self) -> int:
        return self.highs.nbytes

    @property
    def extra_nbytes(self) -> int:
        return 0 if self.extras is None else self.extras.nbytes

    @property
    def nbytes(self) -> int:
        return self.high_nbytes + self.extra_nbytes

    def __repr__(self) -> str:
        return (
            f"SplitTensor({self.fmt.name}+{self.k}, mode={self.mode.value}, "
            f"shape={self.shape}, nbytes={self.nbytes})"
        )

    def copy(self) -> SplitTensor:
        extras = None if self.extras is None else self.extras.copy()
        return SplitTensor(
            self.fmt, self.k, self.mode, self.shape, self.highs.copy(), extras,
            self.seed, self.counter, self.name,
        )

    def snapshot(self):
        return self.highs.copy(), None if self.extras is None else self.extras.words.copy(), self.counter

    def restore(self, snap) -> None:
        highs, words, counter = snap
        self.highs[:] = highs
        if words is not None:
            self.extras.words[:] = words
        self.counter = counter

    def __eq__(self, other) -> bool:
        if not isinstance(other, SplitTensor):
            return NotImplemented
        return (
            (self.fmt, self.k, self.mode, self.shape, self.seed)
            == (other.fmt, other.k, other.mode, other.shape, other.seed)
            and np.array_equal(self.highs, other.highs)
            and self.extras == other.extras
        )

    # -- element access -------------------------------------------------

    def entries(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = self.size if stop is None else stop
        if self.extras is None:
            return np.zeros(stop - start, dtype=np.uint32)
        return self.extras.read(start, stop)

    def extra_lanes(self) -> np.ndarray | None:
        """Zero-copy byte/halfword view of the entries when the width is 8 or 16."""
        if self.width == 8:
            return self.extras.words.view(np.uint8)[: self.size]
        if self.width == 16:
            return self.extras.words.view("<u2")[: self.size]
        return None

    def write_chunk(self, start: int, highs: np.ndarray, entries: np.ndarray) -> None:
        self.highs[start : start + highs.size] = highs
        if self.extras is not None:
            self.extras.write(start, entries)

    def to_f32(self) -> np.ndarray:
        """Full stored value (round-up flags undone)."""
        return decode_values(self.highs, self.entries(), self.fmt, self.k, self.mode).reshape(self.shape)

    def high_view(self) -> np.ndarray:
        """The low-precision values used for forward compute, as float32."""
        return np.asarray(to_float(self.highs, self.fmt)).reshape(self.shape)

    # -- updates --------------------------------------------------------

    def apply_update(self, kernel: Kernel, *aux: np.ndarray) -> None:
        """Replace each element p by ``kernel(p, *aux)`` evaluated in float32.

        ``aux`` arrays must have the tensor's shape; the kernel receives
        flat chunks of them, which are views, so a kernel may update
        optimizer state in place (e.g. ``m[...] = beta * m + g``).
        """
        flat_aux = []
        for a in aux:
            a = np.asarray(a)
            if a.shape != self.shape:
                raise ValueError(f"aux shape {a.shape} does not match {self.shape}")
            flat_aux.append(a.reshape(-1))
        self.counter += 1
        chunk = CHUNK_BLOCKS * BLOCK
        for start in range(0, self.size, chunk):
            stop = min(start + chunk, self.size)
            old_h, old_e = self.highs[start:stop], self.entries(start, stop)
            p = decode_values(old_h, old_e, self.fmt, self.k, self.mode)
            new = np.asarray(kernel(p.copy(), *(a[start:stop] for a in flat_aux)), dtype=np.float32)
            highs, entries = resplit(
                p, new, old_h, old_e, self.fmt, self.k, self.mode, self.seed,
                np.arange(start, stop), self.counter,
            )
            self.write_chunk(start, highs, entries)

    # -- checkpoint -----------------------------------------------------

    def save(self, sink) -> None:
        save(self, sink)

    @classmethod
    def load(cls, source) -> SplitTensor:
        return load(source)


class MasterTensor:
    """Plain float32 parameter, optionally viewed through a low-precision cast.

    With ``view_fmt`` set this is the classic mixed-precision layout: a
    float32 master copy plus a round-to-nearest half copy for compute.
    Without it, plain fp32 training.
    """

    mode = None

    def __init__(self, values, view_fmt: FloatFormat | None = None, name: str | None = None):
        self.values = np.array(values, dtype=np.float32)
        self.view_fmt = view_fmt
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def high_nbytes(self) -> int:
        return 0 if self.view_fmt is None else self.size * self.view_fmt.nbytes

    @property
    def extra_nbytes(self) -> int:
        return self.values.nbytes

    @property
    def nbytes(self) -> int:
        return self.high_nbytes + self.extra_nbytes

    def to_f32(self) -> np.ndarray:
        return self.values.copy()

    def high_view(self) -> np.ndarray:
        if self.view_fmt is None:
            return self.values.copy()
        return round_nearest(self.values, self.view_fmt)

    def apply_update(self, kernel: Kernel, *aux) -> None:
        flat_aux = [np.asarray(a).reshape(-1) for a in aux]
        flat = self.values.reshape(-1)
        flat[:] = kernel(flat.copy(), *flat_aux)

    def snapshot(self):
        return self.values.copy()

    def restore(self, snap) -> None:
        self.values[...] = snap


# ---------------------------------------------------------------------------
# checkpoint format (little-endian):
#   "SPLT" | u16 version | u8 fmt | u8 k | u8 mode | u8 reserved
#   | u64 count | u64 seed | u32 rank | rank * u64 dims | highs | extras words

MAGIC = b"SPLT"
VERSION = 1
_HEADER = struct.Struct("<4sHBBBBQQI")
_FMT_BY_CODE = {0: FP16, 1: BF16, 2: FP8_E5M2}
_MODE_CODES = {RoundMode.RTZ: 0, RoundMode.STOCHASTIC: 1, RoundMode.NEAREST: 2}
_MODE_BY_CODE = {v: k for k, v in _MODE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _open(target, mode):
    if isinstance(target, (str, os.PathLike)):
        return open(target, mode), True
    return target, False


def save(t: SplitTensor, sink) -> None:
    """Write ``t`` to a path or binary file object."""
    f, owned = _open(sink, "wb")
    try:
        f.write(_HEADER.pack(
            MAGIC, VERSION, t.fmt.code, t.k, _MODE_CODES[t.mode], 0,
            t.size, t.seed & 0xFFFFFFFFFFFFFFFF, len(t.shape),
        ))
        f.write(struct.pack(f"<{len(t.shape)}Q", *t.shape))
        f.write(t.highs.astype(t.fmt.dtype.newbyteorder("<")).tobytes())
        if t.extras is not None:
            f.write(t.extras.words.astype("<u4").tobytes())
    finally:
        if owned:
            f.close()


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load(source) -> SplitTensor:
    """Read a tensor written by :func:`save`. Raises :class:`CheckpointError`."""
    f, owned = _open(source, "rb")
    try:
        head = _read_exact(f, _HEADER.size, "header")
        magic, version, fcode, k, mcode, _reserved, count, seed, rank = _HEADER.unpack(head)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(f"unsupported version {version}")
        if fcode not in _FMT_BY_CODE:
            raise CheckpointError(f"unknown format code {fcode}")
        if mcode not in _MODE_BY_CODE:
            raise CheckpointError(f"unknown mode code {mcode}")
        fmt, mode = _FMT_BY_CODE[fcode], _MODE_BY_CODE[mcode]
        shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "shape"))
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointError(f"shape {shape} does not hold {count} elements")
        raw = _read_exact(f, count * fmt.nbytes, "high words")
        highs = np.frombuffer(raw, dtype=fmt.dtype.newbyteorder("<")).astype(fmt.dtype)
        width = entry_width(k, mode)
        extras = None
        if width:
            n_words = -(-count // BLOCK) * width
            words = np.frombuffer(_read_exact(f, 4 * n_words, "extra bits"), dtype="<u4")
            extras = PackedBitBuffer(count, width, words.astype(np.uint32))
        try:
            return SplitTensor(fmt, k, mode, shape, highs, extras, seed)
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
    finally:
        if owned:
            f.close()


def to_bytes(t: SplitTensor) -> bytes:
    buf = io.BytesIO()
    save(t, buf)
    return buf.getvalue()
