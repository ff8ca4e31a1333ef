"""
Checking the autodiff engine
============================

Every adapter tensor's gradient of the full training loss (contrastive plus
distillation) is compared with central finite differences.
"""

import numpy as np

from lmalign import EncoderConfig, LoraConfig, LossConfig, TeacherProvider, TextEncoder, Tokenizer, total_loss
from lmalign import numerics as nx
from lmalign.datakit import gen_synthetic, wrap_caption

tok = Tokenizer.default()
cfg = EncoderConfig(tok.vocab_size, d_model=32, n_heads=4, d_joint=16, lora=LoraConfig(4, 8.0, 0.0))
enc = TextEncoder(cfg, tok)
adapters = enc.init_adapters(0)
rng = np.random.default_rng(0)
for name in adapters.names():
    if name.endswith(".B"):
        adapters[name] = 0.05 * rng.standard_normal(adapters[name].shape)

ds = gen_synthetic(4, 1, 16, 0.2, 0)
seqs = [enc.tokenize(wrap_caption(r.caption)) for r in ds.records]
V = ds.vision.embed_images(ds.records)
teacher = TeacherProvider(ds.vision, 24, 0, ds.class_names)
S_t = teacher.embed_images(ds.records) @ teacher.embed_texts([r.caption for r in ds.records]).T


def loss():
    T = enc.forward(seqs, adapters).embeddings
    return total_loss(V, T, S_t, adapters, LossConfig())[0]


# probe 8 random entries per tensor
errors = nx.gradient_check(loss, adapters.parameters(), max_entries=8, rng=rng)
for name, err in sorted(zip(adapters.names(), errors), key=lambda t: -t[1])[:6]:
    print(f"{name:20s} max relative error {err:.2e}")
print("worst over all tensors:", max(errors))
