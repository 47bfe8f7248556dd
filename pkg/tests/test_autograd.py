import math

import numpy as np
import pytest

from splitprec import BF16, FP16, RoundMode
from splitprec.autograd import Parameter, Tape, backward_conventional, backward_fused, release_grads
from splitprec.memory import MemoryLedger, ledger_report
from splitprec.models import MLP, parse_variant
from splitprec.optim import SGD, Adam, LossScaler, clip_hook
from splitprec.splitstore import MasterTensor, SplitTensor

F = np.float32


def fd_grads(build, arrays, grad_out, h=1e-3):
    """Central differences of sum(out * grad_out) w.r.t. each input array."""

    def objective(vals):
        out = build(Tape(), [Parameter(MasterTensor(v)) for v in vals]).value
        return float(np.sum(out.astype(np.float64) * grad_out))

    result = []
    for i, a in enumerate(arrays):
        g = np.zeros(a.shape)
        for j in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][j] = F(a[j] + h)
            minus[i][j] = F(a[j] - h)
            step = float(plus[i][j]) - float(minus[i][j])
            g[j] = (objective(plus) - objective(minus)) / step
        result.append(g)
    return result


def analytic_grads(build, arrays, grad_out):
    tape = Tape()
    params = [Parameter(MasterTensor(v)) for v in arrays]
    out = build(tape, params)
    grads = backward_conventional(out, grad_out.astype(F) if out.value.ndim else None)
    return [grads[p] for p in params]


def rel_err(a, b):
    a, b = np.ravel(a).astype(np.float64), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return (np.sign(x) * (np.abs(x) + margin)).astype(F)


PRIMS = {
    "matmul": (lambda t, p: t.matmul(t.param(p[0]), t.param(p[1])), lambda r, m, n, q: [(m, n), (n, q)]),
    "add": (lambda t, p: t.add(t.param(p[0]), t.param(p[1])), lambda r, m, n, q: [(m, n), (n,)]),
    "mul": (lambda t, p: t.mul(t.param(p[0]), t.param(p[1])), lambda r, m, n, q: [(m, n), (m, 1)]),
    "relu": (lambda t, p: t.relu(t.param(p[0])), lambda r, m, n, q: [(m, n)]),
    "sigmoid": (lambda t, p: t.sigmoid(t.param(p[0])), lambda r, m, n, q: [(m, n)]),
    "mean": (lambda t, p: t.mean(t.param(p[0])), lambda r, m, n, q: [(m, n)]),
    "mse_loss": (lambda t, p: t.mse_loss(t.param(p[0]), t.param(p[1])), lambda r, m, n, q: [(m, n), (m, n)]),
    "bce_with_logits_loss": (
        lambda t, p: t.bce_with_logits_loss(t.param(p[0]), t.param(p[1])), lambda r, m, n, q: [(m, n), (m, n)]
    ),
}


@pytest.mark.parametrize("op", sorted(PRIMS))
def test_primitive_finite_differences(op, rng):
    build, shapes = PRIMS[op]
    for _ in range(3):
        m, n, q = (int(v) for v in rng.integers(1, 5, 3))
        arrays = [away_from_zero(rng, s) for s in shapes(rng, m, n, q)]
        if op == "bce_with_logits_loss":
            arrays[1] = rng.uniform(0, 1, arrays[1].shape).astype(F)
        out_shape = build(Tape(), [Parameter(MasterTensor(a)) for a in arrays]).value.shape
        grad_out = rng.standard_normal(out_shape) if out_shape else np.float64(1.0)
        ana = analytic_grads(build, arrays, np.asarray(grad_out))
        num = fd_grads(build, arrays, grad_out)
        for a, b in zip(ana, num):
            assert rel_err(a, b) <= 1e-3, op


def test_relu_backward_mask():
    tape = Tape()
    p = Parameter(MasterTensor(np.array([-1.0, 0.0, 2.0], F)))
    out = tape.relu(tape.param(p))
    g = backward_conventional(out, np.array([5, 6, 7], F))[p]
    assert np.array_equal(g, [0, 0, 7])


def test_matmul_backward_formula(rng):
    A, B = rng.standard_normal((3, 4)).astype(F), rng.standard_normal((4, 2)).astype(F)
    dC = rng.standard_normal((3, 2)).astype(F)
    tape = Tape()
    pa, pb = Parameter(MasterTensor(A)), Parameter(MasterTensor(B))
    g = backward_conventional(tape.matmul(tape.param(pa), tape.param(pb)), dC)
    assert np.array_equal(g[pa], dC @ B.T)
    assert np.array_equal(g[pb], A.T @ dC)


def test_bce_symmetric_case():
    tape = Tape()
    loss = tape.bce_with_logits_loss(tape.constant(np.zeros((4, 3))), tape.constant(np.full((4, 3), 0.5)))
    assert math.isclose(float(loss.value), math.log(2), rel_tol=1e-6)


def test_bce_extreme_logits_finite():
    tape = Tape()
    p = Parameter(MasterTensor(np.array([[-200.0, 200.0]], F)))
    loss = tape.bce_with_logits_loss(tape.param(p), tape.constant(np.array([[0.0, 1.0]])))
    assert float(loss.value) == 0.0
    g = backward_conventional(loss)[p]
    assert np.all(np.isfinite(g))


def test_shape_mismatch_rejected():
    tape = Tape()
    a, b = tape.constant(np.zeros((2, 3))), tape.constant(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        tape.matmul(a, b)
    with pytest.raises(ValueError):
        tape.add(a, tape.constant(np.zeros(4)))
    with pytest.raises(ValueError):
        tape.mse_loss(a, tape.constant(np.zeros(6)))


def test_zero_loss_gives_zero_grads(rng):
    tape = Tape()
    w = Parameter(MasterTensor(rng.standard_normal((3, 2)).astype(F)))
    pred = tape.matmul(tape.constant(np.zeros((5, 3))), tape.param(w))
    loss = tape.mse_loss(pred, tape.constant(np.zeros((5, 2))))
    assert float(loss.value) == 0
    assert np.all(backward_conventional(loss)[w] == 0)


def test_compute_format_rounds_outputs(rng):
    tape = Tape(compute_format=FP16)
    x = tape.constant(rng.standard_normal((4, 4)))
    y = tape.sigmoid(tape.matmul(x, x))
    assert y.precision == "fp16"
    assert np.array_equal(y.value, y.value.astype(np.float16).astype(F))


def test_grad_format_rounds_grads(rng):
    tape = Tape(grad_format=BF16)
    p = Parameter(MasterTensor(rng.standard_normal((3, 3)).astype(F)))
    g = backward_conventional(tape.mean(tape.mul(tape.param(p), tape.param(p))))[p]
    assert np.array_equal(g.view(np.uint32) & 0xFFFF, np.zeros((3, 3), np.uint32))


def test_tape_used_once(rng):
    tape = Tape()
    p = Parameter(MasterTensor(np.ones(3, F)))
    loss = tape.mean(tape.param(p))
    backward_conventional(loss)
    with pytest.raises(RuntimeError):
        backward_conventional(loss)
    with pytest.raises(RuntimeError):
        tape.relu(loss)


def test_reentrant_backward_rejected():
    tape = Tape()
    t = SplitTensor.from_f32(np.ones(3), FP16, 13)
    p = Parameter(t)
    loss = tape.mean(tape.param(p))
    opt = SGD([t], lr=0.1)

    def reenter(g):
        backward_conventional(loss)
        return g

    opt.register_hook(reenter)
    with pytest.raises(RuntimeError, match="re-entrant"):
        backward_fused(loss, opt)


def test_unregistered_parameter_rejected():
    tape = Tape()
    p = Parameter(SplitTensor.from_f32(np.ones(3), FP16, 13), name="orphan")
    loss = tape.mean(tape.param(p))
    with pytest.raises(ValueError, match="orphan"):
        backward_fused(loss, SGD([], lr=0.1))


# -- fused vs conventional ----------------------------------------------------


def batch(rng, n=16, d=5):
    x = rng.standard_normal((n, d)).astype(F)
    y = (x[:, :1] > 0).astype(F)
    return x, y


def train(model, opt, data, fused, ledger=None, loss="bce", compute=None, observe=None):
    for x, y in data:
        tape = Tape(compute_format=compute, ledger=ledger)
        out = model.forward(tape, x)
        target = tape.constant(y)
        l = tape.bce_with_logits_loss(out, target) if loss == "bce" else tape.mse_loss(out, target)
        if fused:
            backward_fused(l, opt)
        else:
            grads = backward_conventional(l)
            for p in model.params:
                opt.step_param(p.tensor, grads[p])
            opt.end_iteration()
            release_grads(grads, tape)


VARIANTS = ["fp32", "amp", "fp16", "fp16+8", "fp16+13", "bf16+16", "fp16+8-rstoc", "bf16+8-rstoc", "fp8e5m2+5"]


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("make_opt", [
    lambda ps: SGD(ps, lr=0.1, momentum=0.9),
    lambda ps: Adam(ps, lr=1e-2),
], ids=["sgdm", "adam"])
def test_fused_backward_matches_conventional(variant, make_opt, rng):
    v = parse_variant(variant)
    data = [batch(rng) for _ in range(5)]
    a = MLP((5, 8, 1), v, seed=3)
    b = MLP((5, 8, 1), v, seed=3)
    train(a, make_opt(a.tensors()), data, fused=True, compute=v.compute_format)
    train(b, make_opt(b.tensors()), data, fused=False, compute=v.compute_format)
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa.tensor.to_f32(), pb.tensor.to_f32())
        if v.kind == "split":
            assert pa.tensor == pb.tensor


def test_hooks_see_identical_grads(rng):
    seen = {True: [], False: []}
    data = [batch(rng) for _ in range(3)]
    for fused in (True, False):
        m = MLP((5, 6, 1), parse_variant("fp16+13"), seed=1)
        opt = SGD(m.tensors(), lr=0.1, hooks=[clip_hook(0.05)])
        opt.register_hook(lambda g, fused=fused: seen[fused].append(g.copy()) or g)
        train(m, opt, data, fused)
    key = lambda g: g.shape  # noqa: E731
    assert sorted(map(key, seen[True])) == sorted(map(key, seen[False]))
    fused_by_shape = sorted(seen[True], key=lambda g: (g.shape, g.tobytes()))
    conv_by_shape = sorted(seen[False], key=lambda g: (g.shape, g.tobytes()))
    assert all(np.array_equal(a, b) for a, b in zip(fused_by_shape, conv_by_shape))
    assert max(np.abs(g).max() for g in seen[True]) <= F(0.05)


def test_step_order_is_reverse_topological(rng):
    m = MLP((5, 6, 1), parse_variant("fp16+13"), seed=1)
    order = []

    class Recording(SGD):
        def update(self, slot, grad):
            order.append(slot.param.name)
            super().update(slot, grad)

    opt = Recording(m.tensors(), lr=0.1)
    x, y = batch(rng)
    for _ in range(2):
        tape = Tape()
        backward_fused(tape.mse_loss(m.forward(tape, x), tape.constant(y)), opt)
    assert order == ["b2", "w2", "b1", "w1"] * 2


def test_weight_sharing_steps_once_after_both_contributions(rng):
    w0 = rng.standard_normal((4, 4)).astype(F) * F(0.5)
    x = rng.standard_normal((3, 4)).astype(F)
    t = SplitTensor.from_f32(w0, FP16, 13)
    shared = Parameter(t)
    w_used = t.high_view()
    calls = []
    opt = SGD([t], lr=0.1, hooks=[lambda g: calls.append(g.copy()) or g])
    tape = Tape()
    h = tape.matmul(tape.constant(x), tape.param(shared))
    out = tape.matmul(h, tape.param(shared))
    backward_fused(tape.mean(out), opt)
    assert len(calls) == 1
    # oracle: d/dW mean(x W W) = x^T G W^T + (x W)^T G
    G = np.full((3, 4), 1 / 12, F)
    expect = (x @ w_used).T @ G + x.T @ (G @ w_used.T)
    assert np.allclose(calls[0], expect, rtol=1e-5, atol=1e-7)


def test_no_grad_retention_and_peaks(rng):
    sizes = (5, 12, 3)
    x = rng.standard_normal((8, 5)).astype(F)
    y = rng.standard_normal((8, 3)).astype(F)
    peaks = {}
    for fused in (True, False):
        led = MemoryLedger()
        m = MLP(sizes, parse_variant("bf16+16"), seed=2)
        led.add_parameters(m.params)
        opt = SGD(m.tensors(), lr=0.1, momentum=0.9, ledger=led)
        train(m, opt, [(x, y)], fused, ledger=led, loss="mse")
        assert led.current["grads"] == 0 and led.current["activations"] == 0
        peaks[fused] = led.peak["grads"]
    grad_bytes = [4 * int(np.prod(p.shape)) for p in MLP(sizes, parse_variant("fp32")).params]
    assert peaks[True] == max(grad_bytes)
    assert peaks[False] == sum(grad_bytes)


def test_activations_released_during_backward(rng):
    led = MemoryLedger()
    m = MLP((5, 7, 1), parse_variant("fp16+13"), seed=0)
    tape = Tape(ledger=led)
    x, y = batch(rng)
    loss = tape.mse_loss(m.forward(tape, x), tape.constant(y))
    held = led.current["activations"]
    assert held > 0
    backward_fused(loss, SGD(m.tensors(), lr=0.1))
    assert led.current["activations"] == 0 and led.peak["activations"] == held


def test_loss_scaling_through_fused_backward(rng):
    x, y = batch(rng)
    a = MLP((5, 6, 1), parse_variant("fp16+13"), seed=4)
    b = MLP((5, 6, 1), parse_variant("fp16+13"), seed=4)
    scaler = LossScaler(scale=1024.0)
    opt_a = SGD(a.tensors(), lr=0.1, hooks=[scaler.unscale])
    opt_b = SGD(b.tensors(), lr=0.1)
    tape = Tape()
    assert backward_fused(tape.mse_loss(a.forward(tape, x), tape.constant(y)), opt_a, loss_scale=scaler.scale)
    tape = Tape()
    backward_fused(tape.mse_loss(b.forward(tape, x), tape.constant(y)), opt_b)
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa.tensor.to_f32(), pb.tensor.to_f32())

    before = [p.tensor.copy() for p in a.params]
    tape = Tape()
    out = a.forward(tape, x)
    assert not backward_fused(tape.mse_loss(out, tape.constant(y)), opt_a, loss_scale=1e38)
    assert all(p.tensor == q for p, q in zip(a.params, before))


def test_full_view_fp32_and_bf16_16_identical(rng):
    data = [batch(rng) for _ in range(4)]
    ref = MLP((5, 6, 1), parse_variant("fp32"), seed=5)
    bf = MLP((5, 6, 1), parse_variant("bf16+16"), seed=5, view="full")
    train(ref, SGD(ref.tensors(), lr=0.1, momentum=0.9), data, True)
    train(bf, SGD(bf.tensors(), lr=0.1, momentum=0.9), data, True)
    for pa, pb in zip(ref.params, bf.params):
        assert np.array_equal(pa.tensor.to_f32(), pb.tensor.to_f32())


# -- ledger --------------------------------------------------------------------


def test_ledger_peaks_and_errors():
    led = MemoryLedger()
    led.alloc("grads", 10)
    led.alloc("grads", 5)
    led.free("grads", 12)
    assert led.current["grads"] == 3 and led.peak["grads"] == 15
    with pytest.raises(ValueError):
        led.free("grads", 4)
    with pytest.raises(KeyError):
        led.alloc("weights", 1)


def test_ledger_report_folds_extras():
    led = MemoryLedger()
    t = SplitTensor.from_f32(np.zeros(64), FP16, 8)
    led.add_parameters([t])
    led.alloc("optimizer_state", 256)
    rep = ledger_report(led)
    assert rep["param_high"] == (128, 128)
    assert rep["optimizer_state"] == (256 + 64, 256 + 64)
    assert "param_extra" not in rep
    assert rep["total"] == (128 + 64 + 256, 128 + 64 + 256)


def test_empty_ledger_all_zero():
    assert all(v == (0, 0) for v in ledger_report(MemoryLedger()).values())


def test_stochastic_variant_parses():
    v = parse_variant("fp16+8-rstoc")
    assert (v.fmt, v.k, v.mode) == (FP16, 8, RoundMode.STOCHASTIC)
    assert parse_variant("fp16").mode is RoundMode.NEAREST
    assert parse_variant("fp16-rtz").mode is RoundMode.RTZ
    with pytest.raises(ValueError):
        parse_variant("fp16+14")
    with pytest.raises(ValueError):
        parse_variant("int8")
