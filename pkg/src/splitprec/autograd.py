"""A small reverse-mode autodiff tape with a fused optimizer backward.

Usage::

    tape = Tape()
    h = tape.relu(tape.add(tape.matmul(tape.constant(x), tape.param(w1)), tape.param(b1)))
    loss = tape.mse_loss(tape.add(tape.matmul(h, tape.param(w2)), tape.param(b2)), tape.constant(y))
    backward_fused(loss, opt)      # each parameter steps as soon as its gradient is complete

A tape records one forward pass and can be differentiated once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .floatbits import FloatFormat, round_nearest
from .memory import MemoryLedger, ledger_report

__all__ = [
    "Parameter",
    "Tensor",
    "Tape",
    "backward_fused",
    "backward_conventional",
    "release_grads",
    "MemoryLedger",
    "ledger_report",
]

_F32 = np.float32


class Parameter:
    """A trainable tensor (SplitTensor or MasterTensor) seen by the tape.

    ``view="high"`` feeds the low-precision high words to the forward
    pass; ``view="full"`` feeds the reconstructed float32 value.
    """

    def __init__(self, tensor, name: str | None = None, view: str = "high"):
        if view not in ("high", "full"):
            raise ValueError(f"view must be 'high' or 'full', got {view!r}")
        self.tensor = tensor
        self.name = name if name is not None else getattr(tensor, "name", None)
        self.view = view

    @property
    def shape(self):
        return tuple(self.tensor.shape)

    def value(self) -> np.ndarray:
        v = self.tensor.high_view() if self.view == "high" else self.tensor.to_f32()
        return np.asarray(v, dtype=_F32).reshape(self.shape)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, view={self.view})"


@dataclass(eq=False)
class _Node:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    saved_bytes: int = 0


@dataclass(eq=False)
class Tensor:
    value: np.ndarray
    tape: "Tape"
    node: _Node | None = None
    param: Parameter | None = None
    precision: str = "fp32"

    @property
    def shape(self):
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.node is not None or self.param is not None


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(_F32)


class Tape:
    """Records primitive ops in execution order.

    With ``compute_format`` set every op output is rounded to that
    format (emulated low-precision forward). ``grad_format`` does the
    same for every gradient produced during backward.
    """

    def __init__(
        self,
        compute_format: FloatFormat | None = None,
        grad_format: FloatFormat | None = None,
        ledger: MemoryLedger | None = None,
    ):
        self.compute_format = compute_format
        self.grad_format = grad_format
        self.ledger = ledger
        self.nodes: list[_Node] = []
        self._state = "recording"

    # -- plumbing ---------------------------------------------------------

    @property
    def precision(self) -> str:
        return "fp32" if self.compute_format is None else self.compute_format.name

    def _round(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=_F32)
        if self.compute_format is not None:
            x = np.asarray(round_nearest(x, self.compute_format), dtype=_F32)
        return x

    def grad_nbytes(self, g) -> int:
        """Bytes a parameter gradient occupies at the configured gradient precision."""
        width = 4 if self.grad_format is None else self.grad_format.nbytes
        return int(np.size(g)) * width

    def _round_grad(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=_F32)
        if self.grad_format is not None:
            g = np.asarray(round_nearest(g, self.grad_format), dtype=_F32)
        return g

    def _own(self, *ts: Tensor) -> None:
        for t in ts:
            if not isinstance(t, Tensor) or t.tape is not self:
                raise ValueError("operands must be tensors recorded on this tape")
        if self._state != "recording":
            raise RuntimeError("tape has already been differentiated")

    def _record(self, op, value, inputs, backward, saved=()) -> Tensor:
        saved_bytes = sum(int(np.asarray(s).nbytes) for s in saved)
        if not any(t.requires_grad for t in inputs):
            backward = None
            saved_bytes = 0
        node = _Node(op, tuple(inputs), backward, saved_bytes)
        if backward is not None:
            self.nodes.append(node)
            if self.ledger is not None and saved_bytes:
                self.ledger.alloc("activations", saved_bytes)
        return Tensor(self._round(value), self, node if backward is not None else None, precision=self.precision)

    # -- leaves -----------------------------------------------------------

    def param(self, p: Parameter) -> Tensor:
        return Tensor(p.value(), self, None, p, precision=self.precision)

    def constant(self, x) -> Tensor:
        return Tensor(self._round(x), self, None, None, precision=self.precision)

    # -- primitives -------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        self._own(a, b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        A, B = a.value, b.value
        return self._record("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), (A, B))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._own(a, b)
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ValueError(f"add shape mismatch {a.shape} + {b.shape}") from None
        sa, sb = a.shape, b.shape
        return self._record(
            "add", a.value + b.value, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._own(a, b)
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ValueError(f"mul shape mismatch {a.shape} * {b.shape}") from None
        A, B = a.value, b.value
        return self._record(
            "mul", A * B, (a, b),
            lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)), (A, B),
        )

    def relu(self, a: Tensor) -> Tensor:
        self._own(a)
        mask = a.value > 0
        return self._record("relu", np.where(mask, a.value, _F32(0)), (a,), lambda g: (g * mask,), (mask,))

    def sigmoid(self, a: Tensor) -> Tensor:
        self._own(a)
        s = self._round(_sigmoid(a.value))
        return self._record("sigmoid", s, (a,), lambda g: (g * s * (_F32(1) - s),), (s,))

    def mean(self, a: Tensor) -> Tensor:
        self._own(a)
        n, shape = a.value.size, a.shape
        if n == 0:
            raise ValueError("mean of an empty tensor")
        return self._record(
            "mean", np.mean(a.value, dtype=_F32), (a,),
            lambda g: (np.full(shape, g / _F32(n), dtype=_F32),),
        )

    def mse_loss(self, pred: Tensor, target: Tensor) -> Tensor:
        self._own(pred, target)
        if pred.shape != target.shape:
            raise ValueError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
        d = pred.value - target.value
        n = _F32(d.size)
        return self._record(
            "mse_loss", np.mean(d * d, dtype=_F32), (pred, target),
            lambda g: (g * _F32(2) * d / n, -g * _F32(2) * d / n), (d,),
        )

    def bce_with_logits_loss(self, logits: Tensor, target: Tensor) -> Tensor:
        self._own(logits, target)
        if logits.shape != target.shape:
            raise ValueError(f"bce_with_logits_loss shape mismatch {logits.shape} vs {target.shape}")
        z, y = logits.value, target.value
        n = _F32(z.size)
        per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        s = _sigmoid(z)
        return self._record(
            "bce_with_logits_loss", np.mean(per, dtype=_F32), (logits, target),
            lambda g: (g * (s - y) / n, -g * z / n), (z, y),
        )

    # -- backward ---------------------------------------------------------

    def _sweep(self, output: Tensor, grad_output, on_param_grad) -> None:
        if self._state == "running":
            raise RuntimeError("re-entrant backward")
        self._own(output)
        if grad_output is None:
            if output.value.size != 1:
                raise ValueError("backward of a non-scalar output needs grad_output")
            grad_output = np.ones(output.shape, dtype=_F32)
        grad_output = np.asarray(grad_output, dtype=_F32)
        if grad_output.shape != output.shape:
            raise ValueError("grad_output shape does not match the output")
        self._state = "running"
        try:
            self._run(output, grad_output, on_param_grad)
        finally:
            self._release_all()
            self._state = "done"

    def _run(self, output: Tensor, seed: np.ndarray, on_param_grad) -> None:
        # reachable nodes and per-parameter pending contribution counts
        reach: set[int] = set()
        pending: dict[int, int] = {}
        params: dict[int, Parameter] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t.node is None or id(t.node) in reach:
                continue
            reach.add(id(t.node))
            for inp in t.node.inputs:
                if inp.param is not None:
                    pending[id(inp.param)] = pending.get(id(inp.param), 0) + 1
                    params[id(inp.param)] = inp.param
                elif inp.node is not None:
                    stack.append(inp)
        if output.param is not None:  # differentiating a bare parameter
            params[id(output.param)] = output.param
            on_param_grad(output.param, self._round_grad(seed))
            return

        grads: dict[int, np.ndarray] = {id(output.node): seed} if output.node else {}
        acc: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            if id(node) not in reach:
                continue
            g = grads.pop(id(node), None)
            # overflow here is legitimate (e.g. a loss scale too large); hooks deal with it
            with np.errstate(over="ignore", invalid="ignore"):
                in_grads = node.backward(g) if g is not None else [None] * len(node.inputs)
            self._free_node(node)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is not None:
                    ig = self._round_grad(np.broadcast_to(ig, inp.shape))
                if inp.param is not None:
                    key = id(inp.param)
                    if ig is not None:
                        if key in acc:
                            acc[key] = self._round_grad(acc[key] + ig)
                        else:
                            acc[key] = np.array(ig, dtype=_F32)
                            if self.ledger is not None:
                                self.ledger.alloc("grads", self.grad_nbytes(acc[key]))
                    pending[key] -= 1
                    if pending[key] == 0:
                        pg = acc.pop(key, None)
                        if pg is None:
                            pg = np.zeros(inp.param.shape, dtype=_F32)
                            if self.ledger is not None:
                                self.ledger.alloc("grads", self.grad_nbytes(pg))
                        on_param_grad(inp.param, pg)
                elif inp.node is not None and ig is not None:
                    k = id(inp.node)
                    grads[k] = ig if k not in grads else self._round_grad(grads[k] + ig)

    def _free_node(self, node: _Node) -> None:
        if self.ledger is not None and node.saved_bytes:
            self.ledger.free("activations", node.saved_bytes)
        node.saved_bytes = 0
        node.backward = None

    def _release_all(self) -> None:
        for node in self.nodes:
            self._free_node(node)


def backward_fused(loss: Tensor, optimizer, loss_scale: float = 1.0) -> bool:
    """Back-propagate ``loss`` stepping each parameter as soon as its gradient is final.

    The gradient buffer is released right after the step. Returns False
    when a hook skipped the iteration (all steps are then rolled back).
    """
    tape = loss.tape
    ledger = tape.ledger
    _check_registered(loss, optimizer)

    def step(param: Parameter, grad: np.ndarray) -> None:
        optimizer.step_param(param.tensor, grad)
        if ledger is not None:
            ledger.free("grads", tape.grad_nbytes(grad))

    seed = None if loss_scale == 1.0 else np.full(loss.shape, loss_scale, dtype=_F32)
    try:
        tape._sweep(loss, seed, step)
    except BaseException:
        optimizer.end_iteration()
        raise
    return optimizer.end_iteration()


def backward_conventional(loss: Tensor, grad_output=None) -> dict[Parameter, np.ndarray]:
    """Plain reverse mode: returns every parameter gradient, retained in the ledger."""
    grads: dict[Parameter, np.ndarray] = {}

    def keep(param: Parameter, grad: np.ndarray) -> None:
        grads[param] = grad

    loss.tape._sweep(loss, grad_output, keep)
    return grads


def release_grads(grads: dict, tape: Tape) -> None:
    """Drop conventionally computed gradients and free them from the tape's ledger."""
    if tape.ledger is not None:
        for g in grads.values():
            tape.ledger.free("grads", tape.grad_nbytes(g))
    grads.clear()


def _check_registered(loss: Tensor, optimizer) -> None:
    seen, stack, missing = set(), [loss], []
    while stack:
        t = stack.pop()
        if t.param is not None:
            try:
                optimizer.slot(t.param.tensor)
            except KeyError:
                missing.append(t.param.name or repr(t.param))
        if t.node is None or id(t.node) in seen:
            continue
        seen.add(id(t.node))
        stack.extend(t.node.inputs)
    if missing:
        raise ValueError(f"parameters not registered with the optimizer: {sorted(set(map(str, missing)))}")
