# %% [markdown]
# Where does new knowledge go?
#
# Sentences here are built from four three-symbol words. Doubling the number
# of distinct sentences reuses the same words in new orders, so the first
# rung (which learns words) should barely grow while the second rung (which
# learns word orders) takes on the extra load.

# %%
import numpy as np

from hersim import Cortex, CortexConfig
from hersim.harness import WORD_SET_A, WORD_SET_B, train, word_spec


def trained_load(sentences, seed):
    cx = Cortex(CortexConfig(width=2, master_seed=seed))
    train(cx, word_spec(sentences, repeats=300, seed=seed))
    return cx.rung_load(0), cx.rung_load(1)


seeds = range(3)
few = np.array([trained_load(WORD_SET_A, s) for s in seeds], float)
many = np.array([trained_load(WORD_SET_A + WORD_SET_B, s) for s in seeds], float)

# %%
for r in range(2):
    a, b = few[:, r].mean(), many[:, r].mean()
    print(f"rung {r}: {a:8.0f} -> {b:8.0f} synapses ({b / a - 1:+.1%})")
