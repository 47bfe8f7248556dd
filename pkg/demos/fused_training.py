"""Train a small MLP with the optimizer step fused into back-propagation.

Run: python demos/fused_training.py
"""
# %%
import numpy as np

from splitprec.autograd import Tape, backward_fused
from splitprec.experiments import make_blobs, memory_table
from splitprec.memory import MemoryLedger, ledger_report
from splitprec.models import MLP, parse_variant
from splitprec.optim import SGD, LossScaler

x, y = make_blobs(2000, seed=0)
model = MLP((2, 32, 1), parse_variant("fp16+8-rstoc"), seed=0)
ledger = MemoryLedger()
ledger.add_parameters(model.params)
scaler = LossScaler(scale=1024.0)
opt = SGD(model.tensors(), lr=0.05, momentum=0.9, hooks=[scaler.unscale], ledger=ledger)

# %% every parameter is stepped the moment its gradient is complete
rng = np.random.default_rng(0)
skipped = 0
for epoch in range(5):
    order = rng.permutation(len(x))
    for i in range(0, len(x), 64):
        idx = order[i:i + 64]
        tape = Tape(compute_format=model.variant.compute_format, ledger=ledger)
        loss = tape.bce_with_logits_loss(model.forward(tape, x[idx]), tape.constant(y[idx]))
        skipped += not backward_fused(loss, opt, loss_scale=scaler.scale)
        scaler.update()
    tape = Tape()
    logits = model.forward(tape, x).value
    acc = float(((logits > 0) == (y > 0.5)).mean())
    print(f"epoch {epoch}  last batch loss {float(loss.value):.4f}  accuracy {acc:.3f}  skipped steps {skipped}")

# %% gradients never coexist: the gradient peak is one parameter's worth
for cat, (cur, peak) in ledger_report(ledger).items():
    print(f"{cat:<16} now {cur:>7} B   peak {peak:>7} B")

# %% the same accounting, scaled to a 2B-parameter model
for r in memory_table(["amp", "amp+fused", "fp16+16+fused", "fp16+8+fused"], ["sgdm"]):
    print(f"{r['scenario']:<15} {r['persistent_bytes_per_param']:5.2f} B/param persistent, "
          f"{r['reduction_pct']:5.1f}% below amp at peak")
