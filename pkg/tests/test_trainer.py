import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lmalign.datakit import gen_synthetic
from lmalign.encoder import AdapterSet, TextEncoder
from lmalign.numerics import NonFiniteError
from lmalign.objectives import LossConfig
from lmalign.trainer import (
    METRIC_FIELDS,
    AdamW,
    TrainConfig,
    TrainingDiverged,
    caption_text,
    class_prompt,
    clip_gradients,
    evaluate,
    global_norm,
    lr_at,
    read_metrics,
    train,
)
from lmalign.vision import ImageRecord, TeacherProvider

from helpers import small_config


# ---------------------------------------------------------------- schedule


def test_lr_schedule_examples():
    cfg = TrainConfig(total_steps=1000, warmup_steps=100, peak_lr=5e-4)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == 5e-4
    assert abs(lr_at(550, cfg) - 2.5e-4) < 1e-12
    assert abs(lr_at(1000, cfg)) < 1e-18
    with pytest.raises(ValueError):
        lr_at(1001, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


@given(st.integers(1, 500), st.integers(0, 500), st.floats(1e-6, 1.0))
def test_lr_monotone(total, warm, peak):
    warm = min(warm, total)
    cfg = TrainConfig(total_steps=total, warmup_steps=warm, peak_lr=peak)
    lrs = [lr_at(s, cfg) for s in range(total + 1)]
    assert all(a <= b for a, b in zip(lrs[: warm + 1], lrs[1 : warm + 1]))
    assert all(a >= b for a, b in zip(lrs[warm:], lrs[warm + 1 :]))
    assert max(lrs) <= peak


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_steps=10, warmup_steps=20)
    with pytest.raises(ValueError):
        TrainConfig(grad_clip_norm=0)


# ---------------------------------------------------------------- clipping


def test_clip_examples():
    g = {"a": np.array([0.3, 0.4])}
    out, norm = clip_gradients(g, 1.0)
    assert np.array_equal(out["a"], g["a"]) and abs(norm - 0.5) < 1e-15
    out, norm = clip_gradients({"a": np.array([3.0, 4.0])}, 1.0)
    assert np.allclose(out["a"], [0.6, 0.8], atol=1e-15) and norm == 5.0
    with pytest.raises(NonFiniteError, match="b"):
        clip_gradients({"a": np.ones(2), "b": np.array([np.inf])}, 1.0)


@given(st.integers(0, 2**31), st.floats(0.01, 10.0), st.floats(1.0, 1e6))
def test_clip_post_norm(seed, max_norm, scale):
    r = np.random.default_rng(seed)
    g = {f"t{i}": r.standard_normal(r.integers(1, 20, size=2)) * scale for i in range(4)}
    out, pre = clip_gradients(g, max_norm)
    post = global_norm(out)
    assert post <= max_norm + 1e-12
    if pre > max_norm:
        assert abs(post - max_norm) < 1e-12


# ---------------------------------------------------------------- optimiser


def test_adamw_matches_scalar_oracle():
    ad = AdapterSet({"w": np.array([1.0, -2.0]), "prompts": np.array([[0.5, 0.5]])})
    opt = AdamW(ad, 0.9, 0.98, 1e-8, weight_decay=0.5)
    grads = [{"w": np.array([0.1, 0.2]), "prompts": np.array([[1.0, -1.0]])}, {"w": np.array([-0.3, 0.0]), "prompts": np.array([[0.0, 2.0]])}]
    # oracle, written per scalar
    state = {k: [list(v.data.ravel()), [0.0] * v.data.size, [0.0] * v.data.size] for k, v in ad.tensors.items()}
    for t, g in enumerate(grads, start=1):
        opt.step(ad, g, lr=0.01)
        for name, (p, m, v) in state.items():
            decay = 0.0 if name == "prompts" else 0.5
            for i, gi in enumerate(g[name].ravel()):
                m[i] = 0.9 * m[i] + 0.1 * gi
                v[i] = 0.98 * v[i] + 0.02 * gi * gi
                mh, vh = m[i] / (1 - 0.9**t), v[i] / (1 - 0.98**t)
                p[i] -= 0.01 * (mh / (math.sqrt(vh) + 1e-8) + decay * p[i])
    for name, (p, _, _) in state.items():
        assert np.allclose(ad[name].data.ravel(), p, atol=1e-15)


def test_log_tau_clamped():
    ad = AdapterSet({"log_tau": np.array(math.log(99.0))})
    opt = AdamW(ad)
    for _ in range(5):
        opt.step(ad, {"log_tau": np.array(-1.0)}, lr=1.0)
    assert float(ad.log_tau.data) == math.log(100.0)


# ---------------------------------------------------------------- training loop


@pytest.fixture
def toy(tokenizer):
    ds = gen_synthetic(3, 12, 8, 0.1, 0)
    enc = TextEncoder(small_config(tokenizer), tokenizer)
    teacher = TeacherProvider(ds.vision, 8, 1, ds.class_names)
    return ds, enc, teacher


def cfg(steps=6, **kw):
    base = dict(batch_size=8, total_steps=steps, warmup_steps=min(2, steps), peak_lr=1e-2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_steps_returns_initial(toy):
    ds, enc, _ = toy
    init = enc.init_adapters(0)
    res = train(cfg(0), ds.records, enc, ds.vision, adapters=init)
    assert res.adapters.equals(init) and res.metrics == []


def test_zero_lr_leaves_adapters(toy):
    ds, enc, teacher = toy
    init = enc.init_adapters(0)
    res = train(cfg(1, peak_lr=0.0), ds.records, enc, ds.vision, teacher, adapters=init)
    assert res.adapters.equals(init)


def test_training_is_deterministic_and_logs(toy, tmp_path):
    ds, enc, teacher = toy
    a = train(cfg(), ds.records, enc, ds.vision, teacher, out_dir=tmp_path / "a")
    b = train(cfg(), ds.records, enc, ds.vision, teacher, out_dir=tmp_path / "b")
    ta, tb = (tmp_path / "a" / "metrics.tsv").read_bytes(), (tmp_path / "b" / "metrics.tsv").read_bytes()
    assert ta == tb
    assert a.adapters.equals(b.adapters)
    rows = read_metrics(tmp_path / "a" / "metrics.tsv")
    assert [r["step"] for r in rows] == list(range(1, 7))
    assert set(rows[0]) == set(METRIC_FIELDS)
    assert rows == a.metrics
    assert AdapterSet.load(tmp_path / "a" / "checkpoints" / "final.clmp").equals(a.adapters)


def test_checkpoints_at_eval_every(toy, tmp_path):
    ds, enc, _ = toy
    res = train(cfg(eval_every=2), ds.records, enc, ds.vision, out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == ["step_000002.clmp", "step_000004.clmp", "step_000006.clmp", "final.clmp"]


def test_frozen_state_untouched(toy):
    ds, enc, teacher = toy
    base = {k: v.data.copy() for k, v in enc.base.items()}
    protos = ds.vision.class_prototypes.copy()
    maps = teacher.image_map.copy(), teacher.text_map.copy()
    res = train(cfg(), ds.records, enc, ds.vision, teacher)
    assert all(np.array_equal(base[k], enc.base[k].data) for k in base)
    assert np.array_equal(protos, ds.vision.class_prototypes)
    assert np.array_equal(maps[0], teacher.image_map) and np.array_equal(maps[1], teacher.text_map)
    assert not res.adapters.equals(enc.init_adapters(3))


def test_nan_loss_aborts_with_last_good(toy, tmp_path):
    ds, enc, _ = toy
    recs = list(ds.records)
    recs[0] = ImageRecord(recs[0].image_ref, recs[0].class_id, recs[0].caption, np.full(8, np.nan))
    with pytest.raises(TrainingDiverged) as info:
        train(cfg(batch_size=len(recs)), recs, enc, ds.vision, out_dir=tmp_path)
    assert info.value.step == 1
    assert info.value.last_good is not None and info.value.last_good.exists()
    assert AdapterSet.load(info.value.last_good).equals(enc.init_adapters(3))


def test_loss_descends(toy):
    ds, enc, _ = toy
    res = train(cfg(40, batch_size=12, warmup_steps=5), ds.records, enc, ds.vision)
    totals = [m["total"] for m in res.metrics]
    assert np.mean(totals[-10:]) < np.mean(totals[:10])


def test_caption_modes():
    assert caption_text("a dog", "raw") == "a dog"
    assert caption_text("a dog", "wrapper").startswith("USER: A photo of a a dog.")
    assert class_prompt("dog", "raw") == "A photo of dog"
    with pytest.raises(ValueError):
        caption_text("x", "other")


def test_evaluate_caches_class_embeddings(toy):
    ds, enc, _ = toy
    before = enc.text_encodings
    acc, pred, emb = evaluate(enc, enc.init_adapters(0), ds.vision, ds.records, ds.class_names)
    assert enc.text_encodings - before == 3
    assert emb.shape == (3, 8) and pred.shape == (36,)
    assert 0.0 <= acc <= 1.0


def test_no_distill_weight_matches_teacherless_total(toy):
    ds, enc, teacher = toy
    c = cfg(3, loss=LossConfig(distill_weight=0.0))
    a = train(c, ds.records, enc, ds.vision, teacher)
    b = train(c, ds.records, enc, ds.vision, None)
    assert [m["total"] for m in a.metrics] == [m["total"] for m in b.metrics]
    assert all(m["distill"] > 0 for m in a.metrics)
