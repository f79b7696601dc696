# %% [markdown]
# Segmentation and dimensional reduction
#
# A two-rung cortex watches a stream of four six-symbol sentences, repeated.
# The first rung learns to cut the stream into short chunks and emits one
# symbol per chunk; the second rung sees only those symbols and cuts them
# into longer chunks, so it fires less often.

# %%
from hersim import Cortex, CortexConfig
from hersim.harness import benchmark_spec, perfect_eos_by_rung, train
from hersim.metrics import eos_pattern, eos_rate
from hersim.periphery import multi_flow_stream, period_length

spec = benchmark_spec(repeats=400)
period = period_length(spec)
cx = Cortex(CortexConfig(width=2, n_rungs=2, master_seed=0))
used = train(cx, spec)
print(f"trained in {used} cycles ({used // period} periods of {period})")
print("perfect EOS per rung:", perfect_eos_by_rung(cx, period))

# %% [markdown]
# Run two more periods and look at where each column ends a sequence. The
# offsets inside the period are the same both times round.

# %%
for x in multi_flow_stream(benchmark_spec(repeats=2)):
    cx.step(x)
end = cx.cycle
for r in range(2):
    rate = eos_rate(cx.ledger, [(r, c) for c in range(2)], end - 2 * period, end)
    print(f"rung {r}: {rate:.3f} EOS per column per cycle")

first = eos_pattern(cx.ledger, end - 2 * period, end - period)
second = eos_pattern(cx.ledger, end - period, end)
print("pattern repeats:", first == second)
for (r, c), offset, tag in second:
    print(f"  column ({r},{c}) closes a sequence at offset {offset:2d}, input tag {tag}")
