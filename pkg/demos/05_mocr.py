# %% [markdown]
# Automatic gain control of the band binarizer
#
# Each band compares its energy with a threshold and emits a 40-bit "one" or
# a 10-bit "zero". A slow average of the emitted bit count pushes the
# threshold up when too many bits fire and down when too few do, so each
# band settles where its average sits between 13 and 14 bits.

# %%
import numpy as np

from hersim.periphery import MocrState, mocr_update

rng = np.random.default_rng(1)
scales = [1.0, 0.7, 1.5, 1.0]
bands = [MocrState(1.0, 13.5) for _ in scales]

checkpoints = {30_000, 60_000, 120_000, 200_000}
for t in range(1, 200_001):
    for st, s in zip(bands, scales):
        e = rng.exponential(s)
        mocr_update(st, 40 if e >= st.thr else 10)
    if t in checkpoints:
        acts = " ".join(f"{st.act_ema:5.2f}" for st in bands)
        thrs = " ".join(f"{st.thr:5.2f}" for st in bands)
        print(f"{t / 1000:5.0f} s  activity {acts}   thr {thrs}")

# %% [markdown]
# With exponential energies the operating point is thr = -scale * ln(p) where
# p = (13.5 - 10) / 30 is the firing probability that gives 13.5 bits.

# %%
p = 3.5 / 30
print("analytic thresholds:", [round(float(-s * np.log(p)), 2) for s in scales])
