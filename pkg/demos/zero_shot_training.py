"""
Training adapters for zero-shot classification
==============================================

A synthetic dataset stands in for image/caption pairs: each class has a
prototype direction in the joint space, images are noisy prototypes, and
captions come from templated class names. Only the adapters are trained;
the base transformer and the image side stay frozen.

Pass a step count on the command line (default 300; 2000 is the full recipe).
"""

import sys
import time

from lmalign import EncoderConfig, TeacherProvider, TextEncoder, Tokenizer, TrainConfig, evaluate, train
from lmalign.datakit import gen_synthetic

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

ds = gen_synthetic(n_classes=10, n_per_class=200, d_joint=32, noise_std=0.1, seed=0)
train_set, held_out = ds.split(500)
print(f"{len(train_set)} training records, {len(held_out)} held out, classes: {', '.join(ds.class_names)}")

tok = Tokenizer.default()
enc = TextEncoder(EncoderConfig(tok.vocab_size, d_joint=32), tok)
teacher = TeacherProvider(ds.vision, 48, seed=1, class_names=ds.class_names)

init = enc.init_adapters(0)
acc0, _, _ = evaluate(enc, init, ds.vision, held_out, ds.class_names)
print(f"before training: accuracy {acc0:.3f} (chance 0.1)")

cfg = TrainConfig(total_steps=steps, warmup_steps=min(100, steps // 4))
t0 = time.perf_counter()
result = train(cfg, train_set, enc, ds.vision, teacher, init)
for row in result.metrics[:: max(1, steps // 6)]:
    print(f"step {row['step']:5d}  lr {row['lr']:.2e}  loss {row['total']:.3f}  tau {row['tau']:.1f}")

acc, _, _ = evaluate(enc, result.adapters, ds.vision, held_out, ds.class_names)
print(f"after {steps} steps ({time.perf_counter() - t0:.0f}s): accuracy {acc:.3f}")
