"""Dense k-bit fields packed into 32-bit words, 32 entries per k-word block.

Entry ``i`` lives in block ``i // 32`` at bit offset ``(i % 32) * k`` from
the start of that block, little-endian (entry 0 at bit 0 of word 0). An
entry can straddle two words of the same block but never crosses a block,
so blocks can be read and written independently.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = ["BLOCK", "PackedBitBuffer", "create", "pack_blocks", "unpack_blocks"]

BLOCK = 32
_U32 = np.uint64(0xFFFFFFFF)


@lru_cache(maxsize=None)
def _lanes(k: int) -> tuple[tuple[int, int, bool], ...]:
    """(word within block, shift, straddles) for each of the 32 lanes."""
    out = []
    for j in range(BLOCK):
        bit = j * k
        w, s = divmod(bit, 32)
        out.append((w, s, s + k > 32))
    return tuple(out)


def _check_width(k: int) -> None:
    if not 1 <= k <= 32:
        raise ValueError(f"entry width k={k} out of range [1, 32]")


def pack_blocks(values: np.ndarray, k: int) -> np.ndarray:
    """Pack an ``(nblocks, 32)`` array of k-bit values into ``(nblocks, k)`` words."""
    _check_width(k)
    v = np.asarray(values).astype(np.uint64)
    acc = np.zeros((v.shape[0], k), dtype=np.uint64)
    for j, (w, s, straddle) in enumerate(_lanes(k)):
        lane = v[:, j] << np.uint64(s)
        acc[:, w] |= lane & _U32
        if straddle:
            acc[:, w + 1] |= lane >> np.uint64(32)
    return acc.astype(np.uint32)


def unpack_blocks(words: np.ndarray, k: int) -> np.ndarray:
    """Inverse of :func:`pack_blocks`."""
    _check_width(k)
    wd = np.asarray(words).astype(np.uint64).reshape(-1, k)
    mask = np.uint64((1 << k) - 1)
    out = np.empty((wd.shape[0], BLOCK), dtype=np.uint32)
    for j, (w, s, straddle) in enumerate(_lanes(k)):
        lane = wd[:, w] >> np.uint64(s)
        if straddle:
            lane |= wd[:, w + 1] << np.uint64(32 - s)
        out[:, j] = lane & mask
    return out


class PackedBitBuffer:
    """Array of ``length`` unsigned k-bit entries stored in 32-bit words."""

    def __init__(self, length: int, k: int, words: np.ndarray | None = None):
        _check_width(k)
        if length < 0:
            raise ValueError("length must be non-negative")
        self.k = k
        self.length = length
        n_words = -(-length // BLOCK) * k
        if words is None:
            words = np.zeros(n_words, dtype=np.uint32)
        else:
            words = np.asarray(words, dtype=np.uint32)
            if words.shape != (n_words,):
                raise ValueError(f"expected {n_words} words, got {words.shape}")
        self.words = words

    @classmethod
    def from_values(cls, values, k: int) -> PackedBitBuffer:
        values = np.asarray(values).ravel()
        buf = cls(values.size, k)
        buf.write(0, values)
        return buf

    @property
    def mask(self) -> int:
        return (1 << self.k) - 1

    @property
    def n_blocks(self) -> int:
        return -(-self.length // BLOCK)

    @property
    def nbytes(self) -> int:
        return self.words.nbytes

    def __len__(self) -> int:
        return self.length

    def __repr__(self) -> str:
        return f"PackedBitBuffer(len={self.length}, k={self.k}, words={self.words.size})"

    def copy(self) -> PackedBitBuffer:
        return PackedBitBuffer(self.length, self.k, self.words.copy())

    # -- scalar access ----------------------------------------------------

    def _locate(self, i: int) -> tuple[int, int]:
        if not 0 <= i < self.length:
            raise IndexError(f"index {i} out of range for length {self.length}")
        block, lane = divmod(i, BLOCK)
        w, s = divmod(lane * self.k, 32)
        return block * self.k + w, s

    def get(self, i: int) -> int:
        w, s = self._locate(int(i))
        val = int(self.words[w]) >> s
        if s + self.k > 32:
            val |= int(self.words[w + 1]) << (32 - s)
        return val & self.mask

    def set(self, i: int, v: int) -> None:
        v = int(v)
        if not 0 <= v <= self.mask:
            raise ValueError(f"value {v} does not fit in {self.k} bits")
        w, s = self._locate(int(i))
        field = self.mask << s
        lo = int(self.words[w]) & ~field & 0xFFFFFFFF
        self.words[w] = lo | ((v << s) & 0xFFFFFFFF)
        if s + self.k > 32:
            hi_field = field >> 32
            hi = int(self.words[w + 1]) & ~hi_field
            self.words[w + 1] = hi | (v >> (32 - s))

    __getitem__ = get
    __setitem__ = set

    # -- bulk access --------------------------------------------------------

    def block_words(self, b: int) -> np.ndarray:
        """View of the k words backing block ``b``."""
        if not 0 <= b < self.n_blocks:
            raise IndexError(f"block {b} out of range for {self.n_blocks} blocks")
        return self.words[b * self.k : (b + 1) * self.k]

    def block_gather(self, b: int) -> np.ndarray:
        return unpack_blocks(self.block_words(b), self.k)[0]

    def block_scatter(self, b: int, values) -> None:
        values = np.asarray(values)
        if values.shape != (BLOCK,):
            raise ValueError("block_scatter expects exactly 32 values")
        self._check_values(values)
        # keep the zero-tail invariant in a partial final block
        live = self.length - b * BLOCK
        if live < BLOCK:
            values = np.where(np.arange(BLOCK) < live, values, 0)
        self.block_words(b)[:] = pack_blocks(values[None, :], self.k)[0]

    def _check_values(self, values: np.ndarray) -> None:
        if values.size and (values.min() < 0 or int(values.max()) > self.mask):
            raise ValueError(f"values do not fit in {self.k} bits")

    def read(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Entries ``[start, stop)``; ``start`` must be block-aligned."""
        stop = self.length if stop is None else stop
        if start % BLOCK or not 0 <= start <= stop <= self.length:
            raise ValueError(f"bad range [{start}, {stop})")
        b0, b1 = start // BLOCK, -(-stop // BLOCK)
        vals = unpack_blocks(self.words[b0 * self.k : b1 * self.k], self.k).ravel()
        return vals[: stop - start]

    def write(self, start: int, values) -> None:
        """Overwrite entries from block-aligned ``start`` with ``values``."""
        values = np.asarray(values).ravel()
        stop = start + values.size
        if start % BLOCK or not 0 <= start <= stop <= self.length:
            raise ValueError(f"bad range [{start}, {stop})")
        self._check_values(values)
        b0, b1 = start // BLOCK, -(-stop // BLOCK)
        padded = np.zeros((b1 - b0) * BLOCK, dtype=np.uint32)
        padded[: values.size] = values
        tail_stop = min(b1 * BLOCK, self.length)
        if tail_stop > stop:
            # partially written last block: keep the entries after `stop`
            tail_start = stop - stop % BLOCK
            padded[stop - start : tail_stop - start] = self.read(tail_start, tail_stop)[stop - tail_start :]
        self.words[b0 * self.k : b1 * self.k] = pack_blocks(padded.reshape(-1, BLOCK), self.k).ravel()

    def get_many(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.length):
            raise IndexError("index out of range")
        block, lane = np.divmod(idx, BLOCK)
        w, s = np.divmod(lane * self.k, 32)
        w = block * self.k + w
        lo = self.words[w].astype(np.uint64)
        nxt = np.minimum(w + 1, self.words.size - 1)
        hi = np.where(s + self.k > 32, self.words[nxt].astype(np.uint64), 0)
        comb = lo | (hi << np.uint64(32))
        return ((comb >> s.astype(np.uint64)) & np.uint64(self.mask)).astype(np.uint32)

    def set_many(self, idx, values) -> None:
        """Vectorised :meth:`set`; with repeated indices the last write wins."""
        idx = np.asarray(idx, dtype=np.int64).ravel()
        values = np.broadcast_to(np.asarray(values), idx.shape)
        if idx.size and (idx.min() < 0 or idx.max() >= self.length):
            raise IndexError("index out of range")
        self._check_values(values)
        rev_unique, first = np.unique(idx[::-1], return_index=True)
        idx = rev_unique
        vals = values[::-1][first].astype(np.uint64)
        block, lane = np.divmod(idx, BLOCK)
        w, s = np.divmod(lane * self.k, 32)
        w = block * self.k + w
        s = s.astype(np.uint64)
        field = np.uint64(self.mask) << s
        np.bitwise_and.at(self.words, w, (~field & _U32).astype(np.uint32))
        np.bitwise_or.at(self.words, w, ((vals << s) & _U32).astype(np.uint32))
        st = (s + np.uint64(self.k)) > np.uint64(32)
        if st.any():
            ws = w[st] + 1
            np.bitwise_and.at(self.words, ws, (~(field[st] >> np.uint64(32)) & _U32).astype(np.uint32))
            np.bitwise_or.at(self.words, ws, (vals[st] << s[st] >> np.uint64(32)).astype(np.uint32))

    def to_array(self) -> np.ndarray:
        return self.read(0, self.length)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PackedBitBuffer):
            return NotImplemented
        return (self.k, self.length) == (other.k, other.length) and np.array_equal(self.words, other.words)


def create(length: int, k: int) -> PackedBitBuffer:
    """Zero-initialised buffer of ``length`` k-bit entries."""
    return PackedBitBuffer(length, k)
