# %% [markdown]
# Speculative forwarding with attention
#
# Once a three-rung cortex knows the stream and every CA3 slice is released,
# attention switches on. A column whose forward prediction agrees with what
# the rung above expects sends the symbol up early and mutes its own input.
# Novel input unmutes it again.

# %%
import numpy as np

from hersim import Cortex, CortexConfig, Sdr, TaggedSdr
from hersim.harness import benchmark_spec, train
from hersim.metrics import forwarding_ratio
from hersim.periphery import multi_flow_stream

cfg = CortexConfig(master_seed=0, width=2, n_rungs=3, scale_out=[1, 1, 1],
                   lateral_width=[0, 1, 1], attention=True)
cx = Cortex(cfg)
used = train(cx, benchmark_spec(repeats=400), until="ca3_free")
print(f"all CA3 slices free after {used} cycles")
for x in multi_flow_stream(benchmark_spec(repeats=100)):
    cx.step(x)
state = cx.to_state()


def first_top_symbol(attention):
    c = Cortex.from_state(state)
    c.cfg.attention = attention
    c._recompute_gates()
    for i, x in enumerate(multi_flow_stream(benchmark_spec(repeats=4))):
        rep = c.step(x)
        if any(r == 2 for r, _ in rep.symbols):
            return i


print("first top-rung symbol: cycle", first_top_symbol(False), "without attention,",
      first_top_symbol(True), "with attention")

# %% [markdown]
# Over a few periods, how much of what reaches the top rung was forwarded?

# %%
cx = Cortex.from_state(state)
for x in multi_flow_stream(benchmark_spec(repeats=10)):
    cx.step(x)
print(f"forwarding ratio since training started: {forwarding_ratio(cx):.2f}")

# %% [markdown]
# Inject random input while a column is muted. Its L6b goes Unknown and the
# column re-attaches to its real input.

# %%
rng = np.random.default_rng(7)
stream = iter(multi_flow_stream(benchmark_spec(repeats=10)))
while not cx.columns[0][1].muted:
    cx.step(next(stream))
for _ in range(6):
    noise = [TaggedSdr(Sdr(121, rng.choice(121, 4, replace=False).tolist()), (99, 0)) for _ in range(2)]
    rep = cx.step(noise)
    for m in rep.mutes:
        print("mute event (rung, column, muted):", m)
