import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lmalign import numerics as nx
from lmalign.encoder import (
    AdapterSet,
    EncoderConfig,
    LnPrefixConfig,
    LoraConfig,
    TextEncoder,
    attention_pool,
    build_input,
    build_rpo_mask,
    dump_adapters,
    effective_weight,
    encode_text,
    is_decay_exempt,
    parse_adapters,
)
from lmalign.numerics import ShapeError, Tensor
from lmalign.tokenizer import TokenSequence

from helpers import small_config

CAPTIONS = ["a photo of a dog.", "a cat", "a close-up photo of a red horse.", "bird"]


def randomize_lora(adapters, rng, scale=0.3):
    for name in adapters:
        if name.startswith("lora.") and name.endswith(".B"):
            adapters[name] = rng.standard_normal(adapters[name].shape) * scale
    return adapters


# ---------------------------------------------------------------- config


def test_config_validation(tokenizer):
    V = tokenizer.vocab_size
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(V, d_model=10, n_heads=4)
    with pytest.raises(ValueError, match="n_prompts"):
        EncoderConfig(V, n_prompts=0)
    with pytest.raises(ValueError, match="mutually exclusive"):
        EncoderConfig(V, ln_prefix=LnPrefixConfig())
    EncoderConfig(V, lora=None, ln_prefix=LnPrefixConfig())
    with pytest.raises(ValueError):
        LoraConfig(rank=0)


def test_adapter_names(tokenizer):
    cfg = small_config(tokenizer)
    names = set(TextEncoder(cfg, tokenizer).init_adapters(0).names())
    assert {"prompts", "pool.query", "pool.wq", "pool.wk", "pool.wv", "pool.wo", "out_proj", "log_tau"} <= names
    assert {f"lora.{l}.{w}.{f}" for l in range(2) for w in "qkvo" for f in "AB"} <= names
    lnp = TextEncoder(small_config(tokenizer, lora=None, ln_prefix=LnPrefixConfig(4)), tokenizer).init_adapters(0)
    assert "prefix" in lnp and "lnf.g" in lnp and not any(n.startswith("lora.") for n in lnp)
    assert is_decay_exempt("prompts") and is_decay_exempt("layers.0.ln1.g") and is_decay_exempt("log_tau")
    assert not is_decay_exempt("pool.wq") and not is_decay_exempt("lora.0.q.B")


# ---------------------------------------------------------------- input construction


def test_build_input_appends_prompts(tokenizer):
    enc = TextEncoder(small_config(tokenizer, n_prompts=2), tokenizer)
    ad = enc.init_adapters(3)
    x = build_input(tokenizer.encode("a red dog"), ad, enc)
    assert x.shape == (5, 16)
    assert np.array_equal(x.data[-2:], ad.prompts.data)


def test_empty_and_overlong_captions(tokenizer):
    enc = TextEncoder(small_config(tokenizer, max_text_len=4), tokenizer)
    ad = enc.init_adapters(0)
    with pytest.raises(ValueError, match="empty"):
        enc.encode([TokenSequence(())], ad)
    with pytest.raises(ValueError, match="max_text_len"):
        enc.encode(["a b c d e"], ad)
    trunc = TextEncoder(small_config(tokenizer, max_text_len=4, truncate=True), tokenizer)
    out = trunc.encode(["a photo of a dog"], ad)
    same = trunc.encode(["a photo of a"], ad)
    assert np.array_equal(out.data, same.data)


def test_rpo_mask_examples():
    assert build_rpo_mask(2, 0).astype(int).tolist() == [[1, 0], [1, 1]]
    assert build_rpo_mask(2, 1).astype(int).tolist() == [[1, 0, 0], [1, 1, 0], [1, 1, 1]]
    assert build_rpo_mask(1, 2).astype(int).tolist() == [[1, 0, 0], [1, 1, 1], [1, 1, 1]]


@given(st.integers(1, 6), st.integers(0, 5))
def test_rpo_mask_rule(T, P):
    m = build_rpo_mask(T, P)
    for i in range(T + P):
        for j in range(T + P):
            expected = j <= i if i < T else True
            assert m[i, j] == expected


# ---------------------------------------------------------------- LoRA


def test_effective_weight_zero_delta_is_bit_exact(rng):
    W0 = Tensor(rng.standard_normal((6, 6)))
    A, B = Tensor(rng.standard_normal((6, 2))), Tensor(np.zeros((6, 2)))
    assert np.array_equal(effective_weight(W0, (A, B), 4.0, 2).data, W0.data)


def test_effective_weight_identity_delta(rng):
    W0 = Tensor(rng.standard_normal((4, 4)))
    I = Tensor(np.eye(4))
    assert np.allclose(effective_weight(W0, (I, I), 4.0, 4).data, W0.data + np.eye(4), atol=1e-15)


def test_effective_weight_dense_oracle(rng):
    W0, A, B = rng.standard_normal((4, 4)), rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    alpha = 3.0
    expected = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            expected[i, j] = W0[i, j] + alpha / 2 * sum(B[i, r] * A[j, r] for r in range(2))
    got = effective_weight(Tensor(W0), (Tensor(A), Tensor(B)), alpha, 2).data
    assert np.allclose(got, expected, atol=1e-13)


def test_effective_weight_rank_mismatch(rng):
    W0 = Tensor(np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        effective_weight(W0, (Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 3)))), 1.0, 2)


def test_lora_zero_b_equals_disabled(small_encoder, tokenizer):
    ad = small_encoder.init_adapters(5)
    with_lora = small_encoder.encode(CAPTIONS, ad).data
    disabled = small_encoder.encode(CAPTIONS, ad, use_lora=False).data
    assert np.array_equal(with_lora, disabled)
    stripped = small_encoder.encode(CAPTIONS, ad.without_lora()).data
    assert np.array_equal(with_lora, stripped)


def test_nonzero_lora_changes_output(small_encoder, rng):
    ad = randomize_lora(small_encoder.init_adapters(5), rng)
    assert not np.allclose(small_encoder.encode(CAPTIONS, ad).data, small_encoder.encode(CAPTIONS, ad, use_lora=False).data)


def test_train_dropout_path_matches_eval_path_without_dropout(tokenizer, rng):
    enc = TextEncoder(small_config(tokenizer), tokenizer)
    ad = randomize_lora(enc.init_adapters(1), rng)
    ev = enc.encode(CAPTIONS, ad).data
    tr = enc.encode(CAPTIONS, ad, train=True, rng=np.random.default_rng(0)).data
    assert np.allclose(ev, tr, atol=1e-12)


# ---------------------------------------------------------------- pooling


def pooling_adapters(rng, d=8, d_joint=4):
    return AdapterSet({
        "pool.query": rng.standard_normal((1, d)),
        "pool.wq": rng.standard_normal((d, d)) / math.sqrt(d),
        "pool.wk": rng.standard_normal((d, d)) / math.sqrt(d),
        "pool.wv": rng.standard_normal((d, d)) / math.sqrt(d),
        "pool.wo": rng.standard_normal((d, d)) / math.sqrt(d),
        "out_proj": rng.standard_normal((d, d_joint)),
    })


def loop_attention_pool(X, ad, n_heads):
    d = X.shape[1]
    dh = d // n_heads
    q = ad["pool.query"].data[0] @ ad["pool.wq"].data
    K = X @ ad["pool.wk"].data
    Vv = X @ ad["pool.wv"].data
    ctx = np.zeros(d)
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = [float(np.dot(q[sl], K[i, sl])) / math.sqrt(dh) for i in range(X.shape[0])]
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        z = sum(w)
        for i in range(X.shape[0]):
            ctx[sl] += w[i] / z * Vv[i, sl]
    out = (ctx @ ad["pool.wo"].data) @ ad["out_proj"].data
    return out / math.sqrt(float(np.dot(out, out)))


def test_attention_pool_loop_oracle(rng):
    ad = pooling_adapters(rng)
    X = rng.standard_normal((4, 8))
    assert np.allclose(attention_pool(Tensor(X), ad, 2).data, loop_attention_pool(X, ad, 2), atol=1e-12)


def test_attention_pool_single_and_duplicate_prompts(rng):
    ad = pooling_adapters(rng)
    x = rng.standard_normal((1, 8))
    single = attention_pool(Tensor(x), ad, 2).data
    affine = (x[0] @ ad["pool.wv"].data @ ad["pool.wo"].data) @ ad["out_proj"].data
    assert np.allclose(single, affine / np.linalg.norm(affine), atol=1e-12)
    dup = attention_pool(Tensor(np.vstack([x, x])), ad, 2).data
    assert np.allclose(dup, single, atol=1e-12)
    with pytest.raises(ValueError):
        attention_pool(Tensor(np.zeros((0, 8))), ad, 2)


@given(st.integers(0, 2**31), st.integers(2, 6))
def test_attention_pool_permutation_invariant(seed, P):
    r = np.random.default_rng(seed)
    ad = pooling_adapters(r)
    X = r.standard_normal((P, 8))
    perm = r.permutation(P)
    a = attention_pool(Tensor(X), ad, 2).data
    b = attention_pool(Tensor(X[perm]), ad, 2).data
    assert np.allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------- encoder contracts


@pytest.mark.parametrize("mode", ["attention", "mean"])
@pytest.mark.parametrize("rpo", [True, False])
def test_embedding_norms(tokenizer, mode, rpo):
    enc = TextEncoder(small_config(tokenizer, pooling_mode=mode, rpo_enabled=rpo), tokenizer)
    out = enc.encode(CAPTIONS, enc.init_adapters(2)).data
    assert out.shape == (4, 8)
    assert np.all(np.abs(np.linalg.norm(out, axis=1) - 1.0) < 1e-12)


def test_read_only_prompts_leave_text_states_unchanged(small_encoder, rng):
    seqs = [small_encoder.tokenize(c) for c in CAPTIONS]
    a = randomize_lora(small_encoder.init_adapters(0), rng)
    b = a.copy()
    b["prompts"] = rng.standard_normal(b.prompts.shape) * 5
    ha = small_encoder.forward(seqs, a, return_hidden=True)
    hb = small_encoder.forward(seqs, b, return_hidden=True)
    sl = ha.text_slice
    for la, lb in zip(ha.hidden, hb.hidden):
        for i, n in enumerate(ha.lengths):
            assert la[i, sl][:n].tobytes() == lb[i, sl][:n].tobytes()
    assert not np.array_equal(ha.embeddings.data, hb.embeddings.data)


def test_batching_does_not_change_embeddings(small_encoder):
    ad = small_encoder.init_adapters(4)
    batch = small_encoder.encode(CAPTIONS, ad).data
    for i, c in enumerate(CAPTIONS):
        single = encode_text(small_encoder.tokenize(c), ad, small_encoder).data
        assert np.allclose(single, batch[i], atol=1e-12)


def test_ln_prefix_encoder_runs(tokenizer):
    enc = TextEncoder(small_config(tokenizer, lora=None, ln_prefix=LnPrefixConfig(3)), tokenizer)
    ad = enc.init_adapters(0)
    out = enc.forward([enc.tokenize(c) for c in CAPTIONS], ad, return_hidden=True)
    assert out.text_slice == slice(3, 3 + max(out.lengths))
    assert np.all(np.abs(np.linalg.norm(out.embeddings.data, axis=1) - 1) < 1e-12)


def test_encoder_gradients_all_adapter_tensors(tokenizer):
    r = np.random.default_rng(3)
    cfg = small_config(tokenizer, d_model=8, n_heads=2, n_prompts=2, d_joint=4, lora=LoraConfig(2, 4.0, 0.0), n_layers=1)
    enc = TextEncoder(cfg, tokenizer)
    ad = randomize_lora(enc.init_adapters(1), r)
    seqs = [enc.tokenize(c) for c in CAPTIONS[:2]]
    w = r.standard_normal((2, 4))
    fn = lambda: nx.sum(nx.mul_const(enc.forward(seqs, ad).embeddings, w))  # noqa: E731
    params = [ad[n] for n in ad.names() if n != "log_tau"]
    errs = nx.gradient_check(fn, params, max_entries=6, rng=r)
    assert max(errs) < 1e-4, dict(zip([n for n in ad.names() if n != "log_tau"], errs))


def test_base_weights_untouched_by_encoding(small_encoder, rng):
    before = {k: v.data.copy() for k, v in small_encoder.base.items()}
    ad = randomize_lora(small_encoder.init_adapters(0), rng)
    emb = small_encoder.encode(CAPTIONS, ad)
    nx.grad(nx.sum(emb), ad.parameters())
    assert all(np.array_equal(before[k], small_encoder.base[k].data) for k in before)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_exact(small_encoder, tmp_path, rng):
    ad = randomize_lora(small_encoder.init_adapters(9), rng)
    path = tmp_path / "a.clmp"
    ad.save(path)
    back = AdapterSet.load(path)
    assert back.equals(ad)
    assert back.names() == ad.names()


def test_checkpoint_layout():
    ad = AdapterSet({"x": np.array([[1.0, 2.0, 3.0]])})
    buf = dump_adapters(ad)
    expected = b"CLMP" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"x" + struct.pack("<I", 2)
    expected += struct.pack("<2Q", 1, 3) + struct.pack("<3d", 1.0, 2.0, 3.0)
    assert buf == expected
    with pytest.raises(ValueError, match="magic"):
        parse_adapters(b"XXXX" + buf[4:])
    with pytest.raises(ValueError, match="truncated"):
        parse_adapters(buf[:-3])
