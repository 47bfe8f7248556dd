"""Byte accounting: a live ledger and a closed-form per-parameter model.

The ledger counts alloc/free events per category and remembers peaks.
:func:`memory_model` replays a training step's events on a fresh ledger
for a model that is never allocated, so peaks come out of the same
bookkeeping the real runs use.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass

from .floatbits import FORMATS

__all__ = [
    "CATEGORIES",
    "MemoryLedger",
    "ledger_report",
    "Scenario",
    "parse_scenario",
    "memory_model",
    "OPTIMIZER_STATE_BYTES",
]

CATEGORIES = ("param_high", "param_extra", "grads", "optimizer_state", "activations")
REPORT_CATEGORIES = ("param_high", "grads", "optimizer_state", "activations")


class MemoryLedger:
    def __init__(self):
        self.current = dict.fromkeys(CATEGORIES, 0)
        self.peak = dict.fromkeys(CATEGORIES, 0)
        self.peak_total = 0
        # extras are reported with the optimizer state; keep that sum's own peak
        self._state_like_peak = 0
        self._lock = threading.Lock()

    def _check(self, category: str, nbytes: int) -> int:
        if category not in self.current:
            raise KeyError(f"unknown ledger category {category!r}")
        nbytes = int(nbytes)
        if nbytes < 0:
            raise ValueError("byte counts are non-negative")
        return nbytes

    def alloc(self, category: str, nbytes: int) -> None:
        nbytes = self._check(category, nbytes)
        with self._lock:
            self.current[category] += nbytes
            self.peak[category] = max(self.peak[category], self.current[category])
            self.peak_total = max(self.peak_total, self.total)
            self._state_like_peak = max(
                self._state_like_peak, self.current["optimizer_state"] + self.current["param_extra"]
            )

    def free(self, category: str, nbytes: int) -> None:
        nbytes = self._check(category, nbytes)
        with self._lock:
            if nbytes > self.current[category]:
                raise ValueError(f"freeing {nbytes} bytes of {category} but only {self.current[category]} held")
            self.current[category] -= nbytes

    @property
    def total(self) -> int:
        return sum(self.current.values())

    def add_parameters(self, params) -> None:
        """Account the storage of ``params`` (Parameter or raw tensors)."""
        for p in params:
            t = getattr(p, "tensor", p)
            self.alloc("param_high", t.high_nbytes)
            self.alloc("param_extra", t.extra_nbytes)


def ledger_report(ledger: MemoryLedger) -> dict[str, tuple[int, int]]:
    """Category -> (current, peak) with extra-bit storage counted as optimizer state."""
    cur, peak = ledger.current, ledger.peak
    out = {}
    for c in REPORT_CATEGORIES:
        if c == "optimizer_state":
            out[c] = (cur[c] + cur["param_extra"], ledger._state_like_peak)
        else:
            out[c] = (cur[c], peak[c])
    out["total"] = (ledger.total, ledger.peak_total)
    return out


# ---------------------------------------------------------------------------
# closed-form model

OPTIMIZER_STATE_BYTES = {"sgd": 0, "sgdm": 4, "adam": 8}
_TOKEN = re.compile(r"^(?P<base>[a-z0-9]+)(?:\+(?P<k>\d+))?(?P<opts>(?:\+[a-z]+)*)$")
_OPTIONS = {"fused", "rstoc", "stochastic"}


@dataclass(frozen=True)
class Scenario:
    token: str
    kind: str  # "fp32" | "amp" | "split"
    fmt_bytes: int = 4
    k: int = 0
    stochastic: bool = False
    fused: bool = False


def parse_scenario(token: str) -> Scenario:
    """Parse ``fp32``, ``amp``, ``amp+fused`` or ``<fmt>[+k][+rstoc][+fused]``."""
    m = _TOKEN.match(token.strip().lower())
    if not m:
        raise ValueError(f"unknown scenario {token!r}")
    base, k, opts = m["base"], m["k"], [o for o in m["opts"].split("+") if o]
    bad = set(opts) - _OPTIONS
    if bad:
        raise ValueError(f"unknown scenario option(s) {sorted(bad)} in {token!r}")
    fused = "fused" in opts
    stochastic = "rstoc" in opts or "stochastic" in opts
    if base in ("fp32", "amp"):
        if k is not None or stochastic:
            raise ValueError(f"{base} takes no extra bits or rounding option: {token!r}")
        return Scenario(token, base, 4, 0, False, fused)
    if base not in FORMATS or base == "fp32":
        raise ValueError(f"unknown scenario base {base!r} in {token!r}")
    k = 0 if k is None else int(k)
    if k > 16:
        raise ValueError(f"at most 16 extra bits are modeled, got {k}")
    return Scenario(token, "split", FORMATS[base].nbytes, k, stochastic, fused)


def memory_model(
    n_params: int,
    scenario: Scenario | str,
    optimizer: str = "sgdm",
    layers: int = 1,
    grad_precision: str = "fp32",
    activation_bytes: int = 0,
) -> MemoryLedger:
    """Replay one training step of an ``n_params`` model of ``layers`` equal layers.

    Nothing is allocated. Gradients of the baselines are always fp32;
    ``grad_precision="fmt"`` stores split-scenario gradients at the
    high-word width. Under a fused backward each layer's gradient is
    released before the next one is produced; otherwise gradients are
    left allocated, as frameworks keep those buffers between steps.
    """
    if isinstance(scenario, str):
        scenario = parse_scenario(scenario)
    if optimizer not in OPTIMIZER_STATE_BYTES:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if grad_precision not in ("fp32", "fmt"):
        raise ValueError(f"grad precision must be fp32 or fmt, got {grad_precision!r}")
    if n_params < 0 or layers < 1 or activation_bytes < 0:
        raise ValueError("n_params and activation_bytes must be >= 0 and layers >= 1")

    led = MemoryLedger()
    if scenario.kind == "fp32":
        led.alloc("param_high", 4 * n_params)
    elif scenario.kind == "amp":
        led.alloc("param_high", 2 * n_params)
        led.alloc("param_extra", 4 * n_params)
    else:
        led.alloc("param_high", scenario.fmt_bytes * n_params)
        extra_bits = scenario.k + scenario.stochastic
        led.alloc("param_extra", -(-extra_bits * n_params // 8))
    led.alloc("optimizer_state", OPTIMIZER_STATE_BYTES[optimizer] * n_params)

    grad_bytes = scenario.fmt_bytes if (scenario.kind == "split" and grad_precision == "fmt") else 4
    base, rem = divmod(n_params, layers)
    sizes = [base + (i < rem) for i in range(layers)]

    led.alloc("activations", activation_bytes)
    if scenario.fused:
        for n in reversed(sizes):
            led.alloc("grads", grad_bytes * n)
            led.free("grads", grad_bytes * n)
        led.free("activations", activation_bytes)
    else:
        # gradient buffers stay allocated between iterations
        for n in reversed(sizes):
            led.alloc("grads", grad_bytes * n)
        led.free("activations", activation_bytes)
    return led
