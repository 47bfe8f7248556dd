"""A float32 value, cut into a 16-bit word and a few extra bits.

Run: python demos/split_storage_tour.py
"""
# %%
import numpy as np

from splitprec import BF16, FP16, RoundMode
from splitprec.floatbits import reconstruct, split_rtz, split_stochastic, to_float
from splitprec.packer import create
from splitprec.splitstore import SplitTensor

x = np.float32(3.14159265)
print(f"float32 value      {x!r}  bits {x.view(np.uint32):032b}")

# %% the high word is the truncated fp16; the extra bits continue the significand
for k in (0, 4, 8, 13):
    s = split_rtz(x, FP16, k)
    back = reconstruct(s, FP16, k)
    print(f"fp16+{k:<2}  high={int(s.high_bits):#06x}  extra={int(s.extra_bits):0{max(k, 1)}b}  -> {back!r}")

# %% bf16 keeps the float32 exponent, so 16 extra bits are the whole low half
s = split_rtz(x, BF16, 16)
print(f"bf16+16  high={int(s.high_bits):#06x}  extra={int(s.extra_bits):#06x}  "
      f"(float32 word {x.view(np.uint32):#010x})")

# %% stochastic mode: the high word rounds up sometimes, a flag bit remembers it
s = split_stochastic(np.full(8, x), FP16, 8, seed=1, index=np.arange(8))
print("rounded-up flags:", s.round_flag.astype(int), " high values:", to_float(s.high_bits, FP16))
print("still exact after undoing:", reconstruct(s, FP16, 8)[0] == reconstruct(split_rtz(x, FP16, 8), FP16, 8))

# %% extra bits are packed: 32 entries of 12 bits fill exactly 12 words
buf = create(32, 12)
for i in range(32):
    buf.set(i, (i * 997) & 0xFFF)
print(f"32 x 12-bit entries -> {buf.words.size} words; entry 5 = {buf.get(5)}")

# %% a whole tensor, and what it costs
w = np.random.default_rng(0).standard_normal(1000).astype(np.float32)
for fmt, k, mode in [(FP16, 8, RoundMode.RTZ), (FP16, 8, RoundMode.STOCHASTIC), (BF16, 16, RoundMode.RTZ)]:
    t = SplitTensor.from_f32(w, fmt, k, mode, seed=0)
    err = np.abs(t.to_f32() - w).max()
    print(f"{fmt.name}+{k} {mode.value:<10} {t.nbytes / w.size:.3f} bytes/value, max |error| {err:.2e}")
