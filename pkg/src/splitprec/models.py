"""Precision variants and the small MLP used by the experiments."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .autograd import Parameter, Tape, Tensor
from .floatbits import FORMATS, FP32, FloatFormat, RoundMode, max_extra_bits
from .splitstore import MasterTensor, SplitTensor

__all__ = ["Variant", "parse_variant", "MLP"]

_VARIANT = re.compile(r"^(?P<fmt>[a-z0-9]+)(?:\+(?P<k>\d+))?(?P<rtz>-rtz)?(?P<stoch>-rstoc)?$")


@dataclass(frozen=True)
class Variant:
    """How a parameter is stored.

    ``fp32`` is a plain float32 tensor, ``amp`` a float32 master copy
    computed through fp16, anything else a :class:`SplitTensor`.
    """

    name: str
    kind: str
    fmt: FloatFormat = FP32
    k: int = 0
    mode: RoundMode | None = None

    def make(self, values, seed: int = 0, name: str | None = None):
        if self.kind == "fp32":
            return MasterTensor(values, name=name)
        if self.kind == "amp":
            return MasterTensor(values, view_fmt=self.fmt, name=name)
        return SplitTensor.from_f32(values, self.fmt, self.k, self.mode, seed=seed, name=name)

    @property
    def compute_format(self) -> FloatFormat | None:
        return None if self.kind == "fp32" else self.fmt


def parse_variant(token: str) -> Variant:
    """``fp32``, ``amp``, ``fp16`` (round-to-nearest), ``fp16-rtz``, ``fp16+8``, ``bf16+16-rstoc`` ..."""
    t = token.strip().lower()
    if t == "fp32":
        return Variant(t, "fp32")
    if t == "amp":
        return Variant(t, "amp", FORMATS["fp16"])
    m = _VARIANT.match(t)
    if not m or m["fmt"] not in FORMATS or m["fmt"] == "fp32":
        raise ValueError(f"unknown precision variant {token!r}")
    fmt = FORMATS[m["fmt"]]
    k = int(m["k"] or 0)
    if k > max_extra_bits(fmt):
        raise ValueError(f"{fmt.name} holds at most {max_extra_bits(fmt)} extra bits, got {k}")
    if m["stoch"]:
        mode = RoundMode.STOCHASTIC
    elif k == 0 and not m["rtz"]:
        mode = RoundMode.NEAREST
    else:
        mode = RoundMode.RTZ
    return Variant(t, "split", fmt, k, mode)


class MLP:
    """``x -> relu(x W1 + b1) W2 + b2`` with He-initialised weights."""

    def __init__(self, sizes, variant: Variant, seed: int = 0, view: str = "high", init=None):
        n_in, n_hidden, n_out = sizes
        rng = np.random.default_rng(seed)
        if init is None:
            init = [
                (rng.standard_normal((n_in, n_hidden)) * np.sqrt(2 / n_in)).astype(np.float32),
                np.zeros(n_hidden, np.float32),
                (rng.standard_normal((n_hidden, n_out)) * np.sqrt(2 / n_hidden)).astype(np.float32),
                np.zeros(n_out, np.float32),
            ]
        names = ("w1", "b1", "w2", "b2")
        self.variant = variant
        self.params = [
            Parameter(variant.make(v, seed=seed * 16 + i, name=n), n, view)
            for i, (n, v) in enumerate(zip(names, init))
        ]

    def forward(self, tape: Tape, x) -> Tensor:
        w1, b1, w2, b2 = (tape.param(p) for p in self.params)
        xin = x if isinstance(x, Tensor) else tape.constant(x)
        h = tape.relu(tape.add(tape.matmul(xin, w1), b1))
        return tape.add(tape.matmul(h, w2), b2)

    def tensors(self):
        return [p.tensor for p in self.params]

    def values(self):
        return [p.tensor.to_f32() for p in self.params]
