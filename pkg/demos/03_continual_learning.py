# %% [markdown]
# Learning a second set without forgetting the first
#
# Train on set A, record how the top rung encodes each A sentence, then
# train on set B. The A encodings are checked again afterwards, and the time
# to learn B is compared with learning B on a blank cortex.

# %%
from hersim import Cortex, CortexConfig
from hersim.harness import WORD_SET_A, WORD_SET_B, train, word_spec
from hersim.metrics import EncodingRecorder, encoding_and_similarity, matrix_similarity
from hersim.periphery import multi_flow_stream

seed = 0


def encode(cx, sentences, periods=3):
    rec = EncodingRecorder(cx)
    for x in multi_flow_stream(word_spec(sentences, repeats=periods, seed=seed)):
        rec.observe(cx.step(x), x[0].tag[0])
    return encoding_and_similarity(rec, range(len(sentences)), "rate_vector")


cx = Cortex(CortexConfig(width=2, master_seed=seed))
train(cx, word_spec(WORD_SET_A, seed=seed))
before = encode(cx, WORD_SET_A)
t_after = train(cx, word_spec(WORD_SET_B, seed=seed))
after = encode(cx, WORD_SET_A)

scratch = Cortex(CortexConfig(width=2, master_seed=seed))
t_scratch = train(scratch, word_spec(WORD_SET_B, seed=seed))

# %%
print("A similarity matrix before B:\n", before.round(3))
print("A similarity matrix after B:\n", after.round(3))
print(f"matrix cosine {matrix_similarity(before, after):.4f}")
print(f"cycles to learn B: {t_after} after A, {t_scratch} from scratch")
