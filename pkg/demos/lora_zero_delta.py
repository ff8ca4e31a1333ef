"""
LoRA starts as a no-op
======================

Each attention projection gets a low-rank update W0 + (alpha/r) B A^T.
B starts at zero, so a freshly initialised adapter reproduces the frozen
model exactly, and switching LoRA off at inference is the same as B = 0.
"""

import numpy as np

from lmalign import EncoderConfig, TextEncoder, Tokenizer

tok = Tokenizer.default()
enc = TextEncoder(EncoderConfig(tok.vocab_size), tok)
adapters = enc.init_adapters(0)
captions = ["a photo of a cat.", "a close-up photo of a horse.", "a drawing of a ship."]

on = enc.encode(captions, adapters).data
off = enc.encode(captions, adapters, use_lora=False).data
print("B = 0, LoRA on vs off identical:", on.tobytes() == off.tobytes())

# give every B a small random value; now the two paths differ
rng = np.random.default_rng(0)
for name in adapters.names():
    if name.endswith(".B"):
        adapters[name] = 0.05 * rng.standard_normal(adapters[name].shape)
on = enc.encode(captions, adapters).data
print("random B, max difference:", np.abs(on - off).max())
