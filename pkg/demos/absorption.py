"""Small updates vanish in fp16; a handful of extra bits brings them back.

Run: python demos/absorption.py
"""
# %%
from splitprec.experiments import absorb

# 1e-4 is below half an fp16 ulp at 1.0, so round-to-nearest drops every step
rows = absorb(n=1000, increment=1e-4, start=1.0, seed=0)
print(f"{'storage':<16}{'final':>14}{'rel. deviation':>18}")
for r in rows:
    print(f"{r['variant']:<16}{r['final']:>14.7f}{r['rel_deviation']:>18.2e}")

# %%
# fp16+0 truncates to exactly 1.0, like round-to-nearest fp16.
# fp16+8 moves but truncation loses part of every step; stochastic storage
# rounding keeps the expected step, and fp16+13 holds a full float32.
# float32 itself lands at 1.1000166, a 1.5e-5 drift of its own rounding.
