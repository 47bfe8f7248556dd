"""SGD and Adam operating directly on split-precision parameters.

There is no whole-model ``step()``: the optimizer is driven one
parameter at a time through :meth:`Optimizer.step_param`, which is what
lets the backward pass run the update as soon as a gradient is final.
Anything that would normally happen between backward and step (clipping,
unscaling) is a per-parameter gradient hook instead.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Iterable, Sequence

import numpy as np

from .splitstore import SplitTensor, decode_values, resplit

__all__ = [
    "SkipStep",
    "GradTransform",
    "ParamSlot",
    "clip_hook",
    "scale_hook",
    "LossScaler",
    "Optimizer",
    "SGD",
    "Adam",
    "sgd_rule",
    "adam_rule",
    "sgd_step",
    "adam_step",
    "FusedStream",
    "fused_step",
]

GradTransform = Callable[[np.ndarray], np.ndarray]
_F32 = np.float32


class SkipStep(Exception):
    """Raised by a gradient hook to cancel every update of the current iteration."""


def clip_hook(clip_value: float) -> GradTransform:
    c = _F32(clip_value)

    def clip(grad):
        return np.clip(grad, -c, c)

    return clip


def scale_hook(factor: float) -> GradTransform:
    f = _F32(factor)

    def scale(grad):
        return grad * f

    return scale


class LossScaler:
    """Dynamic loss scaling expressed as a gradient hook.

    Register :meth:`unscale` on the optimizer and seed the backward pass
    with :attr:`scale`. A non-finite gradient raises :class:`SkipStep`;
    call :meth:`update` once per iteration afterwards.
    """

    def __init__(self, scale=2.0**16, growth_factor=2.0, backoff_factor=0.5, growth_interval=2000):
        self.scale = float(scale)
        self.growth_factor = growth_factor
        self.backoff_factor = backoff_factor
        self.growth_interval = growth_interval
        self.found_inf = False
        self._good_steps = 0

    def unscale(self, grad):
        g = np.asarray(grad, dtype=_F32) / _F32(self.scale)
        if not np.all(np.isfinite(g)):
            self.found_inf = True
            raise SkipStep("non-finite gradient")
        return g

    unscale.may_skip = True

    def update(self) -> None:
        if self.found_inf:
            self.scale *= self.backoff_factor
            self._good_steps = 0
        else:
            self._good_steps += 1
            if self._good_steps >= self.growth_interval:
                self.scale *= self.growth_factor
                self._good_steps = 0
        self.found_inf = False


@dataclass(eq=False)
class ParamSlot:
    param: SplitTensor
    state: dict[str, np.ndarray] = field(default_factory=dict)
    hooks: list[GradTransform] = field(default_factory=list)
    step: int = 0


# ---------------------------------------------------------------------------
# update rules: elementwise, float32, usable on whole tensors or streams


def sgd_rule(p, g, buf=None, *, lr, momentum, weight_decay, nesterov):
    if weight_decay:
        g = g + weight_decay * p
    if buf is None:
        d = g
    else:
        buf[...] = momentum * buf + g
        d = g + momentum * buf if nesterov else buf
    return p - lr * d


def adam_rule(p, g, m, v, *, lr, beta1, beta2, one_minus_beta1, one_minus_beta2, eps, weight_decay, bc1, bc2):
    if weight_decay:
        g = g + weight_decay * p
    m[...] = beta1 * m + one_minus_beta1 * g
    v[...] = beta2 * v + one_minus_beta2 * (g * g)
    m_hat = m / bc1
    v_hat = v / bc2
    return p - lr * m_hat / (np.sqrt(v_hat) + eps)


def _check_lr(lr) -> None:
    if not math.isfinite(lr):
        raise ValueError(f"learning rate must be finite, got {lr}")


def _sgd_coeffs(lr, momentum, weight_decay, nesterov):
    _check_lr(lr)
    return dict(lr=_F32(lr), momentum=_F32(momentum), weight_decay=_F32(weight_decay), nesterov=nesterov)


def _adam_coeffs(t, lr, betas, eps, weight_decay):
    _check_lr(lr)
    b1, b2 = betas
    return dict(
        lr=_F32(lr), beta1=_F32(b1), beta2=_F32(b2), one_minus_beta1=_F32(1 - b1), one_minus_beta2=_F32(1 - b2),
        eps=_F32(eps), weight_decay=_F32(weight_decay),
        bc1=_F32(1 - b1**t), bc2=_F32(1 - b2**t),
    )


def sgd_step(slot: ParamSlot, grad, lr, momentum=0.0, weight_decay=0.0, nesterov=False) -> None:
    """One SGD(-momentum) update of ``slot.param`` with an already-transformed gradient."""
    coeffs = _sgd_coeffs(lr, momentum, weight_decay, nesterov)
    state = [slot.state["momentum_buffer"]] if momentum else []
    slot.param.apply_update(partial(sgd_rule, **coeffs), np.asarray(grad, _F32), *state)
    slot.step += 1


def adam_step(slot: ParamSlot, grad, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0) -> None:
    """One Adam update; the parameter is reconstructed at full precision inside the kernel."""
    coeffs = _adam_coeffs(slot.step + 1, lr, betas, eps, weight_decay)
    slot.param.apply_update(
        partial(adam_rule, **coeffs), np.asarray(grad, _F32), slot.state["exp_avg"], slot.state["exp_avg_sq"]
    )
    slot.step += 1


# ---------------------------------------------------------------------------


class Optimizer:
    """Per-parameter optimizer base.

    A skip raised by a hook cancels the whole iteration: later
    ``step_param`` calls are no-ops and :meth:`end_iteration` rolls back
    the parameters already stepped. Rollback snapshots are only taken
    when some registered hook can skip.
    """

    state_names: tuple[str, ...] = ()

    def __init__(self, params: Iterable, hooks: Sequence[GradTransform] = (), ledger=None):
        self.slots: list[ParamSlot] = []
        self._by_id: dict[int, ParamSlot] = {}
        self.ledger = ledger
        for p in params:
            slot = ParamSlot(p, {n: np.zeros(p.shape, _F32) for n in self.state_names}, list(hooks))
            self.slots.append(slot)
            self._by_id[id(p)] = slot
            if ledger is not None:
                ledger.alloc("optimizer_state", sum(a.nbytes for a in slot.state.values()))
        self._skipped = False
        self._snapshots: dict[int, tuple] = {}
        self._lock = threading.Lock()

    def slot(self, param) -> ParamSlot:
        try:
            return self._by_id[id(param)]
        except KeyError:
            raise KeyError("parameter is not managed by this optimizer") from None

    def register_hook(self, hook: GradTransform, params=None) -> None:
        """Append ``hook`` to the gradient transforms of ``params`` (default: all)."""
        slots = self.slots if params is None else [self.slot(p) for p in params]
        for s in slots:
            s.hooks.append(hook)

    @property
    def skipped(self) -> bool:
        return self._skipped

    def _may_skip(self) -> bool:
        return any(getattr(h, "may_skip", False) for s in self.slots for h in s.hooks)

    def transform_grad(self, slot: ParamSlot, grad) -> np.ndarray:
        g = np.asarray(grad, dtype=_F32)
        if g.shape != tuple(slot.param.shape):
            raise ValueError(f"gradient shape {g.shape} does not match parameter {slot.param.shape}")
        for hook in slot.hooks:
            g = np.asarray(hook(g), dtype=_F32)
        return g

    def step_param(self, param, grad) -> bool:
        """Transform ``grad`` with the slot's hooks and update ``param``.

        Returns False when the iteration has been skipped. The gradient is
        not retained.
        """
        slot = self.slot(param)
        if self._skipped:
            return False
        try:
            g = self.transform_grad(slot, grad)
        except SkipStep:
            with self._lock:
                self._skipped = True
            return False
        if self._may_skip():
            snap = (slot, slot.param.snapshot(), {k: v.copy() for k, v in slot.state.items()}, slot.step)
            with self._lock:
                self._snapshots.setdefault(id(slot), snap)
        self.update(slot, g)
        return True

    def end_iteration(self) -> bool:
        """Close the iteration; returns False (after rolling back) if it was skipped."""
        applied = not self._skipped
        if not applied:
            for slot, psnap, state, step in self._snapshots.values():
                slot.param.restore(psnap)
                for k, v in state.items():
                    slot.state[k][...] = v
                slot.step = step
        self._snapshots.clear()
        self._skipped = False
        return applied

    # subclasses
    def update(self, slot: ParamSlot, grad: np.ndarray) -> None:
        raise NotImplementedError

    def rule(self):
        raise NotImplementedError

    def coefficients(self, slot: ParamSlot) -> dict:
        raise NotImplementedError

    def state_for(self, slot: ParamSlot) -> list[np.ndarray]:
        return [slot.state[n] for n in self.state_names]


class SGD(Optimizer):
    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0, nesterov=False, hooks=(), ledger=None):
        _check_lr(lr)
        if nesterov and not momentum:
            raise ValueError("nesterov requires momentum")
        self.lr, self.momentum, self.weight_decay, self.nesterov = lr, momentum, weight_decay, nesterov
        self.state_names = ("momentum_buffer",) if momentum else ()
        super().__init__(params, hooks, ledger)

    def update(self, slot, grad):
        sgd_step(slot, grad, self.lr, self.momentum, self.weight_decay, self.nesterov)

    def rule(self):
        return sgd_rule

    def coefficients(self, slot):
        return _sgd_coeffs(self.lr, self.momentum, self.weight_decay, self.nesterov)


class Adam(Optimizer):
    state_names = ("exp_avg", "exp_avg_sq")

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, hooks=(), ledger=None):
        _check_lr(lr)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        super().__init__(params, hooks, ledger)

    def update(self, slot, grad):
        adam_step(slot, grad, self.lr, self.betas, self.eps, self.weight_decay)

    def rule(self):
        return adam_rule

    def coefficients(self, slot):
        return _adam_coeffs(slot.step + 1, self.lr, self.betas, self.eps, self.weight_decay)


# ---------------------------------------------------------------------------
# fused stream


FUSED_WIDTHS = (8, 16)


class FusedStream:
    """All parameters of an optimizer viewed as one concatenated value stream.

    Only k = 8 or 16 is accepted: then every entry sits in its own byte
    or halfword lane and elements can be addressed without regard to
    which parameter (or 32-entry block) they belong to.
    """

    def __init__(self, optimizer: Optimizer):
        self.optimizer = optimizer
        first = None
        for i, slot in enumerate(optimizer.slots):
            p = slot.param
            label = f"parameter {i}" + (f" ({p.name!r})" if getattr(p, "name", None) else "")
            if not isinstance(p, SplitTensor):
                raise ValueError(f"{label} is not a SplitTensor")
            if p.k not in FUSED_WIDTHS:
                raise ValueError(f"{label} has k={p.k}; fused streams support only 8 or 16 extra bits")
            if first is None:
                first = p
            elif (p.fmt, p.mode) != (first.fmt, first.mode):
                raise ValueError(f"{label} has format/mode {p.fmt.name}/{p.mode.value}, expected "
                                 f"{first.fmt.name}/{first.mode.value}")
        sizes = [s.param.size for s in optimizer.slots]
        self.sizes = np.array(sizes, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)
        self.total = int(self.offsets[-1])

    def __len__(self) -> int:
        return self.total


def _entries(p: SplitTensor) -> np.ndarray:
    lanes = p.extra_lanes()
    return (lanes if lanes is not None else p.entries()).astype(np.uint32)


def fused_step(stream: FusedStream, grads: Sequence) -> bool:
    """Update every parameter in one pass over the concatenated stream.

    Bitwise identical to calling ``step_param`` for each slot in order.
    Returns False when a hook skipped the iteration (nothing is updated).
    """
    opt = stream.optimizer
    slots = opt.slots
    if len(grads) != len(slots):
        raise ValueError(f"expected {len(slots)} gradients, got {len(grads)}")
    if not slots:
        return True
    try:
        gs = [opt.transform_grad(s, g).reshape(-1) for s, g in zip(slots, grads)]
    except SkipStep:
        return False
    fmt, k, mode = slots[0].param.fmt, slots[0].param.k, slots[0].param.mode
    old_h = np.concatenate([s.param.highs for s in slots])
    old_e = np.concatenate([_entries(s.param) for s in slots])
    p = decode_values(old_h, old_e, fmt, k, mode)
    g = np.concatenate(gs)
    names = opt.state_names
    state = [np.concatenate([s.state[n].reshape(-1) for s in slots]) for n in names]
    per_slot = [opt.coefficients(s) for s in slots]
    coeffs = {}
    for key, val in per_slot[0].items():
        vals = [c[key] for c in per_slot]
        if isinstance(val, np.floating) and any(v != val for v in vals):
            coeffs[key] = np.repeat(np.array(vals, dtype=_F32), stream.sizes)
        else:
            coeffs[key] = val
    new = np.asarray(opt.rule()(p.copy(), g, *state, **coeffs), dtype=_F32)

    seeds = np.repeat(np.array([s.param.seed for s in slots], dtype=np.uint64), stream.sizes)
    counters = np.repeat(np.array([s.param.counter + 1 for s in slots], dtype=np.uint64), stream.sizes)
    index = np.arange(stream.total) - np.repeat(stream.offsets[:-1], stream.sizes)
    highs, entries = resplit(p, new, old_h, old_e, fmt, k, mode, seeds, index, counters)

    for i, s in enumerate(slots):
        a, b = stream.offsets[i], stream.offsets[i + 1]
        t = s.param
        t.highs[:] = highs[a:b]
        lanes = t.extra_lanes()
        if lanes is not None:
            lanes[:] = entries[a:b]
        else:
            t.extras.write(0, entries[a:b])
        t.counter += 1
        for n, arr in zip(names, state):
            s.state[n].reshape(-1)[:] = arr[a:b]
        s.step += 1
    return True
