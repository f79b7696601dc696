# %% [markdown]
# Checkpoints and determinism
#
# A run saved and reloaded continues exactly as if it had never stopped, and
# the thread count does not change the outcome.

# %%
import tempfile
from pathlib import Path

from hersim import Cortex, CortexConfig
from hersim.harness import benchmark_spec, checkpoint_bytes, load_checkpoint, save_checkpoint
from hersim.periphery import multi_flow_stream

cfg = CortexConfig(width=2, n_rungs=2, master_seed=3)
stream = list(multi_flow_stream(benchmark_spec(repeats=40)))

a = Cortex(cfg)
for x in stream[:500]:
    a.step(x)

path = Path(tempfile.mkdtemp()) / "run.ckpt"
size = save_checkpoint(a, path)
b, _ = load_checkpoint(path, expected=cfg)
print(f"checkpoint: {size} bytes at cycle {a.cycle}")

for x in stream[500:]:
    ra, rb = a.step(x), b.step(x)
    assert ra == rb
print("continuations agree:", checkpoint_bytes(a) == checkpoint_bytes(b))

# %%
threaded = Cortex(cfg, threads=4)
single = Cortex(cfg)
for x in stream:
    single.step(x)
    threaded.step(x)
print("1 vs 4 threads agree:", checkpoint_bytes(single) == checkpoint_bytes(threaded))
threaded.close()
