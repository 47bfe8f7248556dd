"""How accumulation error grows with the number of in-place additions.

Run: python demos/rounding_error.py
"""
# %%
from splitprec import FP16, RoundMode
from splitprec.experiments import error_bench

rows = error_bench(FP16, 8, (RoundMode.RTZ, RoundMode.STOCHASTIC), seed=0,
                   sizes=(10, 100, 1000, 10_000), conds=(), trials=10)
variants = list(dict.fromkeys(r["variant"] for r in rows))
print(f"{'n':>7}" + "".join(f"{v:>15}" for v in variants))
for n in sorted({r["n"] for r in rows}):
    by = {r["variant"]: r["mean_rel_error"] for r in rows if r["n"] == n}
    print(f"{n:>7}" + "".join(f"{by[v]:>15.2e}" for v in variants))

# %%
# truncated storage drifts in one direction, so its error grows about
# linearly; stochastic rounding errors cancel and grow like sqrt(n).
