"""
Read-only prompts
=================

Learned prompt tokens are appended after the caption. The attention mask
lets them read every real text token, but text tokens never read them back,
so changing the prompts cannot move any text-position activation.
"""

import numpy as np

from lmalign import EncoderConfig, TextEncoder, Tokenizer
from lmalign.encoder import build_rpo_mask

# the mask for 3 text tokens followed by 2 prompts: causal block, then all-ones rows
print(build_rpo_mask(3, 2).astype(int))

tok = Tokenizer.default()
enc = TextEncoder(EncoderConfig(tok.vocab_size), tok)
seqs = [enc.tokenize(c) for c in ["a photo of a dog.", "a blurry photo of a red car."]]

# two adapter sets that differ only in their prompts
a = enc.init_adapters(0)
b = a.copy()
b["prompts"] = np.random.default_rng(1).standard_normal(b.prompts.shape) * 3

ha = enc.forward(seqs, a, return_hidden=True)
hb = enc.forward(seqs, b, return_hidden=True)
for layer, (x, y) in enumerate(zip(ha.hidden, hb.hidden)):
    same = x[:, ha.text_slice].tobytes() == y[:, hb.text_slice].tobytes()
    print(f"layer {layer}: text positions bit-identical = {same}")

# the pooled embeddings do change, because they are read from the prompt outputs
print("embedding shift:", np.abs(ha.embeddings.data - hb.embeddings.data).max())
