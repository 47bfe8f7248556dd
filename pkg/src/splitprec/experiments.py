"""The desk-scale experiments behind the command line.

Every function returns a list of row dicts (ordered keys) and is fully
determined by its arguments, including the seed.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autograd import Tape, backward_conventional, backward_fused, release_grads
from .floatbits import FP16, FP32, FloatFormat, RoundMode, _check_k, max_extra_bits, uniform
from .memory import MemoryLedger, ledger_report, memory_model, parse_scenario
from .models import MLP, Variant, parse_variant
from .optim import SGD, Adam
from .splitstore import MasterTensor, SplitTensor

__all__ = [
    "BenchVariant",
    "bench_variants",
    "quantize",
    "accumulate",
    "error_bench",
    "absorb",
    "make_blobs",
    "load_dataset",
    "DatasetError",
    "train_toy",
    "memory_table",
]

_F32 = np.float32


# ---------------------------------------------------------------------------
# error bench


@dataclass(frozen=True)
class BenchVariant:
    name: str
    fmt: FloatFormat
    k: int
    mode: RoundMode | None  # None: plain float32 arithmetic

    @property
    def unit_roundoff(self) -> float:
        bits = FP32.mantissa_bits if self.mode is None else self.fmt.mantissa_bits + self.k
        return 2.0 ** -(bits + 1)


def bench_variants(fmt: FloatFormat = FP16, k: int = 8, modes=(RoundMode.RTZ, RoundMode.STOCHASTIC)):
    out = [
        BenchVariant("fp32", FP32, 0, None),
        BenchVariant(fmt.name, fmt, 0, RoundMode.NEAREST),
        BenchVariant(f"{fmt.name}-rtz", fmt, 0, RoundMode.RTZ),
    ]
    for mode in modes:
        suffix = "-rstoc" if mode is RoundMode.STOCHASTIC else ""
        out.append(BenchVariant(f"{fmt.name}+{k}{suffix}", fmt, k, mode))
    return out


def quantize(x, fmt: FloatFormat, k: int, mode: RoundMode, u=None) -> np.ndarray:
    """Value stored by a ``fmt``+``k`` cell after writing float32 ``x``.

    Elementwise equal to encode-then-decode through the split storage
    (stochastic mode consuming the draws ``u``), but with far fewer
    array passes; the benchmark calls it once per addition.
    """
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    e = np.maximum(np.frexp(ax)[1] - 1, fmt.emin)
    q = e - (fmt.mantissa_bits + k)
    y = np.ldexp(ax, -q)
    if mode is RoundMode.NEAREST:
        n = np.rint(y)
    else:
        n = np.floor(y)
        if mode is RoundMode.STOCHASTIC:
            n += u < (y - n)
    r = np.ldexp(n, q)
    # saturation: largest high word with all-ones extra bits
    top = fmt.max_finite + 2.0 ** (fmt.emax - fmt.mantissa_bits) * (1 - 2.0**-k)
    r = np.minimum(r, top)
    return np.copysign(r, x).astype(_F32)


def accumulate(v: BenchVariant, xs: np.ndarray, checkpoints, seed: int):
    """Sum the rows of ``xs`` (steps x trials) in place under ``v``.

    Returns {n: (stored values, view values)} at each checkpoint n. The
    view is what a forward pass would read: the high word alone.
    """
    steps, trials = xs.shape
    idx = np.arange(trials, dtype=np.uint64)
    want = sorted(set(int(c) for c in checkpoints))
    out = {}
    acc = np.zeros(trials, _F32)
    block = 4096
    for start in range(0, steps, block):
        stop = min(start + block, steps)
        if v.mode is RoundMode.STOCHASTIC:
            counters = np.arange(start + 1, stop + 1, dtype=np.uint64)[:, None]
            draws = uniform(seed, idx[None, :], counters, stream=1)
        for i in range(start, stop):
            s = acc + xs[i]
            if v.mode is None:
                acc = s
            elif v.mode is RoundMode.STOCHASTIC:
                acc = quantize(s, v.fmt, v.k, v.mode, draws[i - start])
            else:
                acc = quantize(s, v.fmt, v.k, v.mode)
            n = i + 1
            if want and n == want[0]:
                want.pop(0)
                out[n] = (acc.copy(), _view(v, acc, seed, idx, n))
    return out


def _view(v: BenchVariant, stored, seed, idx, counter):
    if v.mode is None or v.k == 0:
        return stored.copy()
    if v.mode is RoundMode.STOCHASTIC:
        return quantize(stored, v.fmt, 0, v.mode, uniform(seed, idx, counter, stream=0))
    return quantize(stored, v.fmt, 0, RoundMode.RTZ)


def _exact_prefix_sums(xs: np.ndarray, checkpoints) -> dict[int, np.ndarray]:
    return {
        n: np.array([math.fsum(xs[:n, t].astype(np.float64)) for t in range(xs.shape[1])])
        for n in checkpoints
    }


def _error_rows(panel, v, results, exact, trials, cond_of):
    rows = []
    for n in sorted(results):
        stored, view = results[n]
        ref = exact[n]
        denom = np.where(ref == 0, 1.0, np.abs(ref))
        err = np.abs(stored.astype(np.float64) - ref) / denom
        verr = np.abs(view.astype(np.float64) - ref) / denom
        rows.append({
            "panel": panel,
            "n": n,
            "cond": cond_of(n),
            "variant": v.name,
            "trials": trials,
            "mean_rel_error": float(err.mean()),
            "std_rel_error": float(err.std()),
            "max_rel_error": float(err.max()),
            "mean_error_over_u": float(err.mean() / v.unit_roundoff),
            "mean_view_rel_error": float(verr.mean()),
        })
    return rows


def _bench_one(args):
    panel, v, xs, checkpoints, seed, exact, cond = args
    results = accumulate(v, xs, checkpoints, seed)
    return _error_rows(panel, v, results, exact, xs.shape[1], lambda n: cond)


def error_bench(
    fmt: FloatFormat = FP16,
    k: int = 8,
    modes=(RoundMode.RTZ, RoundMode.STOCHASTIC),
    seed: int = 0,
    sizes=(10, 100, 1000, 10_000, 100_000),
    conds=(),
    trials: int = 30,
    cond_n: int = 10_000,
    jobs: int = 1,
) -> list[dict]:
    """Relative error of in-place accumulation of standard-normal values.

    The size panel records every n in ``sizes`` along one run per trial,
    so smaller n are prefixes of the same stream. The condition panel sums
    ``cond_n`` values made of pairs (x, -x(1-d)) with x > 0 and
    d = 2/(c+1), whose condition number sum|x_i|/|sum x_i| is exactly c.
    """
    _check_k(fmt, k)
    if trials < 1 or cond_n < 2 or any(n < 1 for n in sizes):
        raise ValueError("trials, element counts and cond_n must be positive")
    variants = bench_variants(fmt, k, modes)
    rng = np.random.default_rng(seed)
    tasks = []
    if sizes:
        n_max = max(sizes)
        xs = rng.standard_normal((n_max, trials)).astype(_F32)
        exact = _exact_prefix_sums(xs, sizes)
        tasks += [("size", v, xs, sizes, seed, exact, "") for v in variants]
    for c in conds:
        if c < 1:
            raise ValueError(f"condition numbers are >= 1, got {c}")
        half = max(cond_n // 2, 1)
        x = (np.abs(rng.standard_normal((half, trials))) + 0.5).astype(_F32)
        d = 2.0 / (c + 1.0)
        xs = np.empty((2 * half, trials), _F32)
        xs[0::2] = x
        xs[1::2] = (-x.astype(np.float64) * (1.0 - d)).astype(_F32)
        exact = _exact_prefix_sums(xs, [2 * half])
        tasks += [("cond", v, xs, [2 * half], seed, exact, c) for v in variants]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_bench_one, tasks))
    else:
        chunks = [_bench_one(t) for t in tasks]
    return [row for chunk in chunks for row in chunk]


# ---------------------------------------------------------------------------
# absorption


def absorb(
    fmt: FloatFormat = FP16,
    ks=None,
    modes=(RoundMode.RTZ, RoundMode.STOCHASTIC),
    seed: int = 0,
    n: int = 1000,
    increment: float = 1e-4,
    start: float = 1.0,
) -> list[dict]:
    """Repeatedly add a small increment to one stored value, per storage variant."""
    if not (math.isfinite(increment) and math.isfinite(start)) or n < 1:
        raise ValueError("start and increment must be finite and n positive")
    if ks is None:
        ks = sorted({0, 8, max_extra_bits(fmt)})
    inc = _F32(increment)
    truth = start + n * increment
    kernel = lambda p: p + inc  # noqa: E731
    cells = [("fp32", FP32.name, "", "fp32", MasterTensor(np.array([start], _F32)))]
    cells.append((fmt.name, fmt.name, 0, "nearest", SplitTensor.from_f32([start], fmt, 0, RoundMode.NEAREST)))
    for k in ks:
        for mode in modes:
            suffix = "-rstoc" if mode is RoundMode.STOCHASTIC else "-rtz"
            t = SplitTensor.from_f32([start], fmt, k, mode, seed=seed)
            cells.append((f"{fmt.name}+{k}{suffix}", fmt.name, k, mode.value, t))
    rows = []
    for name, fname, k, mode, t in cells:
        for _ in range(n):
            t.apply_update(kernel)
        final = float(t.to_f32()[0])
        rows.append({
            "variant": name,
            "format": fname,
            "k": k,
            "mode": mode,
            "n": n,
            "increment": increment,
            "final": final,
            "truth": truth,
            "rel_deviation": abs(final - truth) / abs(truth),
        })
    return rows


# ---------------------------------------------------------------------------
# toy training


class DatasetError(ValueError):
    pass


def make_blobs(n: int = 2000, dim: int = 2, seed: int = 0, separation: float = 2.0):
    """Two Gaussian classes centred at +-separation/2 along a random direction."""
    if not 2 <= n <= 10_000:
        raise ValueError("synthetic dataset size must be in [2, 10000]")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    y = (np.arange(n) % 2).astype(_F32)
    x = rng.standard_normal((n, dim)) + np.outer(y - 0.5, direction) * separation
    perm = rng.permutation(n)
    return x[perm].astype(_F32), y[perm, None]


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``x1,...,xd,label`` rows (label 0/1); '#' lines and a header row are skipped."""
    xs, ys = [], []
    width = None
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if not xs and lineno == 1:
                    continue  # header
                raise DatasetError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
            if len(vals) < 2:
                raise DatasetError(f"{path}:{lineno}: need at least one feature and a label")
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} fields, got {len(vals)}")
            if vals[-1] not in (0.0, 1.0):
                raise DatasetError(f"{path}:{lineno}: label must be 0 or 1, got {vals[-1]}")
            if not all(math.isfinite(v) for v in vals):
                raise DatasetError(f"{path}:{lineno}: non-finite value")
            xs.append(vals[:-1])
            ys.append(vals[-1])
    if not xs:
        raise DatasetError(f"{path}: no data rows")
    return np.array(xs, _F32), np.array(ys, _F32)[:, None]


def _make_optimizer(name, tensors, lr, ledger):
    if name == "sgd":
        return SGD(tensors, lr=lr, ledger=ledger)
    if name == "sgdm":
        return SGD(tensors, lr=lr, momentum=0.9, ledger=ledger)
    if name == "adam":
        return Adam(tensors, lr=lr, ledger=ledger)
    raise ValueError(f"unknown optimizer {name!r}")


def _train_variant(args):
    (variant, x, y, hidden, epochs, batch, lr, optimizer, seed, fused, grad_precision, forward, init) = args
    ledger = MemoryLedger()
    model = MLP((x.shape[1], hidden, 1), variant, seed=seed, view="full" if forward == "full" else "high", init=init)
    ledger.add_parameters(model.params)
    opt = _make_optimizer(optimizer, model.tensors(), lr, ledger)
    compute = variant.compute_format if forward == "low" else None
    grad_fmt = variant.fmt if (grad_precision == "fmt" and variant.kind != "fp32") else None
    order_rng = np.random.default_rng(seed + 1)
    rows = []
    for epoch in range(1, epochs + 1):
        perm = order_rng.permutation(len(x))
        losses = []
        for s in range(0, len(x), batch):
            sel = perm[s : s + batch]
            tape = Tape(compute_format=compute, grad_format=grad_fmt, ledger=ledger)
            loss = tape.bce_with_logits_loss(model.forward(tape, x[sel]), tape.constant(y[sel]))
            losses.append(float(loss.value))
            if fused:
                backward_fused(loss, opt)
            else:
                grads = backward_conventional(loss)
                for p in model.params:
                    opt.step_param(p.tensor, grads[p])
                opt.end_iteration()
                release_grads(grads, tape)
        tape = Tape(compute_format=compute)
        logits = model.forward(tape, x).value
        full_loss = float(tape.bce_with_logits_loss(model.forward(tape, x), tape.constant(y)).value)
        # float32 forward on the full stored values: shows progress the high words hide
        tape = Tape()
        xin = tape.constant(x)
        w1, b1, w2, b2 = (tape.constant(p.tensor.to_f32()) for p in model.params)
        h = tape.relu(tape.add(tape.matmul(xin, w1), b1))
        eval_loss = float(tape.bce_with_logits_loss(tape.add(tape.matmul(h, w2), b2), tape.constant(y)).value)
        rep = ledger_report(ledger)
        rows.append({
            "variant": variant.name,
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "loss": full_loss,
            "stored_loss": eval_loss,
            "accuracy": float(np.mean((logits > 0) == (y > 0.5))),
            "peak_param_bytes": rep["param_high"][1],
            "peak_grad_bytes": rep["grads"][1],
            "peak_state_bytes": rep["optimizer_state"][1],
            "peak_activation_bytes": rep["activations"][1],
            "peak_total_bytes": rep["total"][1],
        })
    return rows


def pretrain(x, y, hidden, epochs, batch, lr, seed):
    """float32 weights after ``epochs`` of plain training, used as a shared warm start."""
    model = MLP((x.shape[1], hidden, 1), parse_variant("fp32"), seed=seed)
    opt = SGD(model.tensors(), lr=lr, momentum=0.9)
    order_rng = np.random.default_rng(seed + 2)
    for _ in range(epochs):
        perm = order_rng.permutation(len(x))
        for s in range(0, len(x), batch):
            sel = perm[s : s + batch]
            tape = Tape()
            backward_fused(tape.bce_with_logits_loss(model.forward(tape, x[sel]), tape.constant(y[sel])), opt)
    return model.values()


def train_toy(
    variants=("fp32", "amp", "fp16", "fp16+8", "fp16+13", "bf16+16"),
    data=None,
    n: int = 2000,
    hidden: int = 32,
    epochs: int = 10,
    batch: int = 64,
    lr: float = 0.05,
    optimizer: str = "sgdm",
    seed: int = 0,
    fused: bool = True,
    grad_precision: str = "fp32",
    forward: str = "low",
    warm_start: int = 0,
    warm_lr: float = 0.05,
    jobs: int = 1,
) -> list[dict]:
    """Train the same MLP (same init, same batch order) under each precision variant.

    ``warm_start`` epochs of float32 pre-training at ``warm_lr`` give every
    variant the same near-converged starting point.
    """
    if forward not in ("low", "full"):
        raise ValueError("forward must be 'low' or 'full'")
    if grad_precision not in ("fp32", "fmt"):
        raise ValueError("grad precision must be fp32 or fmt")
    for value, what in ((hidden, "hidden"), (epochs, "epochs"), (batch, "batch")):
        if value < 1:
            raise ValueError(f"{what} must be positive")
    if not math.isfinite(lr) or lr <= 0:
        raise ValueError("learning rate must be positive and finite")
    parsed = [v if isinstance(v, Variant) else parse_variant(v) for v in variants]
    x, y = data if data is not None else make_blobs(n, seed=seed)
    init = pretrain(x, y, hidden, warm_start, batch, warm_lr, seed) if warm_start else None
    tasks = [
        (v, x, y, hidden, epochs, batch, lr, optimizer, seed, fused, grad_precision, forward, init) for v in parsed
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_train_variant, tasks))
    else:
        chunks = [_train_variant(t) for t in tasks]
    return [row for chunk in chunks for row in chunk]


# ---------------------------------------------------------------------------
# memory model


DEFAULT_SCENARIOS = ("fp32", "amp", "amp+fused", "fp16+16", "fp16+16+fused", "fp16+8+fused", "bf16+16+fused")


def memory_table(
    scenarios=DEFAULT_SCENARIOS,
    optimizers=("sgdm", "adam"),
    n_params: int = 2_000_000_000,
    layers: int = 24,
    grad_precision: str = "fp32",
    activation_bytes: int = 0,
    baseline: str = "amp",
) -> list[dict]:
    """Bytes per parameter and reduction against ``baseline`` for each scenario."""
    if n_params < 1:
        raise ValueError("parameter count must be positive")
    parsed = [parse_scenario(s) for s in scenarios]
    rows = []
    for opt in optimizers:
        base = memory_model(n_params, baseline, opt, layers, grad_precision, activation_bytes)
        for sc in parsed:
            led = memory_model(n_params, sc, opt, layers, grad_precision, activation_bytes)
            rep = ledger_report(led)
            persistent = sum(led.current.values())
            rows.append({
                "scenario": sc.token,
                "optimizer": opt,
                "params": n_params,
                "weight_bytes_per_param": rep["param_high"][1] / n_params,
                "state_bytes_per_param": rep["optimizer_state"][1] / n_params,
                "peak_grad_bytes_per_param": rep["grads"][1] / n_params,
                "persistent_bytes_per_param": persistent / n_params,
                "peak_bytes_per_param": led.peak_total / n_params,
                "reduction_pct": 100.0 * (1 - led.peak_total / base.peak_total),
                "persistent_reduction_pct": 100.0 * (1 - persistent / sum(base.current.values())),
            })
    return rows


def rows_to_csv(rows, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
