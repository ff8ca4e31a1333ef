"""
Likelihood scoring versus cached class embeddings
=================================================

Classifying with a generative LM means scoring every class caption for every
image: one LM pass per (image, class). The contrastive encoder instead embeds
each class name once and classifies every image with dot products.
"""

import time

from lmalign import EncoderConfig, TextEncoder, Tokenizer, evaluate
from lmalign.datakit import gen_synthetic
from lmalign.gptscore import ToyConditionalLM, class_caption_tokens, gptscore_evaluate

tok = Tokenizer.default()
ds = gen_synthetic(n_classes=20, n_per_class=5, d_joint=32, noise_std=0.1, seed=0)

enc = TextEncoder(EncoderConfig(tok.vocab_size, d_joint=32), tok)
t0 = time.perf_counter()
evaluate(enc, enc.init_adapters(0), ds.vision, ds.records, ds.class_names)
t_eval = time.perf_counter() - t0
print(f"cached embeddings: {enc.text_encodings} text encodings, {t_eval:.3f}s")

lm = ToyConditionalLM(tok.vocab_size, d_image=32)
t0 = time.perf_counter()
res = gptscore_evaluate(lm, ds.vision.embed_images(ds.records), class_caption_tokens(tok, ds.class_names))
t_gpt = time.perf_counter() - t0
print(f"likelihood scoring: {res.forward_passes} LM passes, {t_gpt:.3f}s")
print(f"ratio {t_gpt / t_eval:.0f}x")
