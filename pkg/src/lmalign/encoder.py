"""Causal transformer text tower adapted with read-only prompts, LoRA and attention pooling.

The base transformer stands in for a pretrained language model: its weights
are drawn once from ``EncoderConfig.base_seed`` and never updated. Everything
trainable lives in an :class:`AdapterSet`.

Sequence layout for one caption, ``Q`` prefix tokens, ``T`` text tokens and
``P`` prompts::

    [ prefix (Q) | text (T, padded to the batch max) | prompts (P) ]

Text tokens carry learned absolute position embeddings; prefix and prompt
vectors carry none.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor
from .tokenizer import TokenSequence, Tokenizer

LORA_TARGETS = ("q", "k", "v", "o")
POOLING_MODES = ("attention", "mean")
INIT_LOG_TAU = math.log(1 / 0.07)
MAX_LOG_TAU = math.log(100.0)

CHECKPOINT_MAGIC = b"CLMP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 16.0
    dropout: float = 0.1
    targets: tuple[str, ...] = LORA_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("LoRA dropout must be in [0, 1)")
        unknown = set(self.targets) - set(LORA_TARGETS)
        if unknown:
            raise ValueError(f"unknown LoRA targets {sorted(unknown)}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass(frozen=True)
class LnPrefixConfig:
    n_prefix: int = 12
    train_layernorm: bool = True

    def __post_init__(self):
        if self.n_prefix < 1:
            raise ValueError("n_prefix must be positive")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_text_len: int = 64
    n_prompts: int = 24
    d_joint: int = 32
    pooling_mode: str = "attention"
    rpo_enabled: bool = True
    lora: LoraConfig | None = field(default_factory=LoraConfig)
    ln_prefix: LnPrefixConfig | None = None
    d_ff: int | None = None
    base_seed: int = 0
    truncate: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_text_len", "d_joint"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.rpo_enabled and self.n_prompts < 1:
            raise ValueError("n_prompts must be >= 1 when read-only prompts are enabled")
        if self.pooling_mode not in POOLING_MODES:
            raise ValueError(f"pooling_mode must be one of {POOLING_MODES}")
        if self.lora is not None and self.lora.rank >= self.d_model:
            raise ValueError("LoRA rank must be smaller than d_model")
        if self.lora is not None and self.ln_prefix is not None:
            raise ValueError("ln_prefix and LoRA are mutually exclusive")

    @property
    def prompt_count(self) -> int:
        return self.n_prompts if self.rpo_enabled else 0

    @property
    def prefix_count(self) -> int:
        return self.ln_prefix.n_prefix if self.ln_prefix is not None else 0

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model


# ---------------------------------------------------------------- adapters


class AdapterSet:
    """Named trainable tensors; the only state that training changes."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self.tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self.tensors[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def get(self, name: str) -> Tensor | None:
        return self.tensors.get(name)

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    @property
    def prompts(self) -> Tensor | None:
        return self.tensors.get("prompts")

    @property
    def log_tau(self) -> Tensor:
        return self.tensors["log_tau"]

    def copy(self) -> AdapterSet:
        return AdapterSet({k: Tensor(v.data.copy()) for k, v in self.tensors.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def equals(self, other: AdapterSet) -> bool:
        """Bit-exact comparison of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            self[k].shape == other[k].shape and self[k].data.tobytes() == other[k].data.tobytes()
            for k in self.tensors
        )

    def without_lora(self) -> AdapterSet:
        return AdapterSet({k: v for k, v in self.tensors.items() if not k.startswith("lora.")})

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(dump_adapters(self))

    @classmethod
    def load(cls, path: str | Path) -> AdapterSet:
        return parse_adapters(Path(path).read_bytes())


def dump_adapters(adapters: AdapterSet) -> bytes:
    """Serialise to the CLMP checkpoint layout (all integers little-endian).

    magic ``CLMP``, u32 version, then per tensor until end of file:
    u32 name length, UTF-8 name, u32 rank, rank x u64 dims, float64 payload.
    """
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, t in adapters.tensors.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", t.ndim))
        out.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(out)


def parse_adapters(buf: bytes) -> AdapterSet:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an adapter checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    tensors: dict[str, Tensor] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise ValueError(f"truncated payload for tensor {name!r}")
            data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
            pos += 8 * count
            tensors[name] = Tensor(data.reshape(dims))
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint at byte {pos}") from exc
    return AdapterSet(tensors)


def init_adapters(config: EncoderConfig, seed: int = 0, base: dict[str, Tensor] | None = None) -> AdapterSet:
    """Fresh adapters: LoRA B starts at zero so the adapted model equals the base."""
    rng = np.random.default_rng(seed)
    d, dj = config.d_model, config.d_joint
    init_std = 1.0 / math.sqrt(d)
    t: dict[str, np.ndarray] = {}
    if config.prompt_count:
        t["prompts"] = rng.standard_normal((config.prompt_count, d))
    if config.ln_prefix is not None:
        t["prefix"] = rng.standard_normal((config.ln_prefix.n_prefix, d))
    if config.lora is not None:
        r = config.lora.rank
        for layer in range(config.n_layers):
            for which in config.lora.targets:
                t[f"lora.{layer}.{which}.A"] = 0.02 * rng.standard_normal((d, r))
                t[f"lora.{layer}.{which}.B"] = np.zeros((d, r))
    if config.pooling_mode == "attention":
        t["pool.query"] = init_std * rng.standard_normal((1, d))
        for w in ("wq", "wk", "wv", "wo"):
            t[f"pool.{w}"] = init_std * rng.standard_normal((d, d))
    t["out_proj"] = init_std * rng.standard_normal((d, dj))
    t["log_tau"] = np.array(INIT_LOG_TAU)
    if config.ln_prefix is not None and config.ln_prefix.train_layernorm:
        base = base if base is not None else init_base_weights(config)
        for name in layernorm_names(config.n_layers):
            t[name] = base[name].data.copy()
    return AdapterSet({k: Tensor(v) for k, v in t.items()})


def layernorm_names(n_layers: int) -> list[str]:
    names = []
    for layer in range(n_layers):
        for ln in ("ln1", "ln2"):
            names += [f"layers.{layer}.{ln}.g", f"layers.{layer}.{ln}.b"]
    return names + ["lnf.g", "lnf.b"]


def is_decay_exempt(name: str) -> bool:
    """Prompts, prefix, temperature and normalisation params get no weight decay."""
    return name in ("prompts", "prefix", "log_tau") or name.endswith((".g", ".b")) and "ln" in name


# ---------------------------------------------------------------- base transformer


def init_transformer(
    rng: np.random.Generator, vocab_size: int, d_model: int, n_layers: int, d_ff: int, max_len: int
) -> dict[str, Tensor]:
    d = d_model
    w: dict[str, np.ndarray] = {
        "tok_emb": rng.standard_normal((vocab_size, d)),
        "pos_emb": 0.5 * rng.standard_normal((max_len, d)),
    }
    for layer in range(n_layers):
        p = f"layers.{layer}."
        w[p + "ln1.g"] = np.ones(d)
        w[p + "ln1.b"] = np.zeros(d)
        for which in LORA_TARGETS:
            # stored as [d_out, d_in]; applied as h @ W.T
            w[p + f"attn.{which}"] = rng.standard_normal((d, d)) / math.sqrt(d)
        w[p + "ln2.g"] = np.ones(d)
        w[p + "ln2.b"] = np.zeros(d)
        w[p + "ff.w1"] = rng.standard_normal((d, d_ff)) / math.sqrt(d)
        w[p + "ff.b1"] = np.zeros(d_ff)
        w[p + "ff.w2"] = rng.standard_normal((d_ff, d)) / math.sqrt(d_ff)
        w[p + "ff.b2"] = np.zeros(d)
    w["lnf.g"] = np.ones(d)
    w["lnf.b"] = np.zeros(d)
    return {k: Tensor(v) for k, v in w.items()}


def init_base_weights(config: EncoderConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.base_seed)
    return init_transformer(
        rng, config.vocab_size, config.d_model, config.n_layers, config.ff_dim, config.max_text_len
    )


def self_attention(h: Tensor, mask: np.ndarray, n_heads: int, project: Callable[[str, Tensor], Tensor]) -> Tensor:
    B, L, d = h.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (B, L, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(project("q", h)), heads(project("k", h)), heads(project("v", h))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = nx.softmax_row(scores, mask[:, None, :, :])
    ctx = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
    return project("o", ctx)


def run_blocks(
    x: Tensor,
    mask: np.ndarray,
    n_layers: int,
    n_heads: int,
    param: Callable[[str], Tensor],
    project: Callable[[int, str, Tensor], Tensor],
    hidden: list[np.ndarray] | None = None,
) -> Tensor:
    """Pre-norm transformer blocks followed by the final layer norm."""
    if hidden is not None:
        hidden.append(x.data)
    for layer in range(n_layers):
        p = f"layers.{layer}."
        h = nx.layer_norm(x, param(p + "ln1.g"), param(p + "ln1.b"))
        x = nx.add(x, self_attention(h, mask, n_heads, lambda which, t, _l=layer: project(_l, which, t)))
        h = nx.layer_norm(x, param(p + "ln2.g"), param(p + "ln2.b"))
        f = nx.gelu(nx.add_bias(nx.matmul(h, param(p + "ff.w1")), param(p + "ff.b1")))
        x = nx.add(x, nx.add_bias(nx.matmul(f, param(p + "ff.w2")), param(p + "ff.b2")))
        if hidden is not None:
            hidden.append(x.data)
    return nx.layer_norm(x, param("lnf.g"), param("lnf.b"))


def causal_mask(lengths: Sequence[int], t_max: int) -> np.ndarray:
    return batch_mask(lengths, t_max, 0, 0)


def batch_mask(lengths: Sequence[int], t_max: int, n_prefix: int, n_prompts: int) -> np.ndarray:
    """Boolean attention mask ``[B, L, L]`` (row attends to column when True).

    Prefix and text rows are causal; padded text rows see only themselves;
    prompt rows see the prefix, all real text and every prompt.
    """
    Q, P = n_prefix, n_prompts
    L = Q + t_max + P
    pos = np.arange(L)
    is_prefix = pos < Q
    is_prompt = pos >= Q + t_max
    lengths = np.asarray(lengths)[:, None]
    is_real_text = (~is_prefix & ~is_prompt)[None, :] & (pos[None, :] - Q < lengths)
    col_ok = is_prefix[None, :] | is_real_text | is_prompt[None, :]  # [B, L]
    causal = pos[None, :] <= pos[:, None]
    row_causal = (is_prefix[None, :] | is_real_text)[:, :, None]
    mask = np.where(
        row_causal,
        causal[None] & (is_prefix[None, None, :] | is_real_text[:, None, :]),
        is_prompt[None, :, None] & col_ok[:, None, :],
    )
    pad_rows = ~(row_causal[:, :, 0] | is_prompt[None, :])
    b_idx, r_idx = np.nonzero(pad_rows)
    mask[b_idx, r_idx, r_idx] = True
    return mask


def build_rpo_mask(n_text: int, n_prompts: int) -> np.ndarray:
    """Read-only prompt mask for one caption of ``n_text`` tokens."""
    if n_text < 1 or n_prompts < 0:
        raise ValueError("need n_text >= 1 and n_prompts >= 0")
    return batch_mask([n_text], n_text, 0, n_prompts)[0]


def effective_weight(base: Tensor, pair: tuple[Tensor, Tensor], alpha: float, rank: int) -> Tensor:
    """``W0 + (alpha / rank) * B @ A.T`` for W0 of shape [d_out, d_in].

    ``A`` is [d_in, rank] (the side that meets the input), ``B`` is [d_out, rank].
    """
    A, B = pair
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != rank or B.shape[1] != rank:
        raise ShapeError(f"LoRA factors {A.shape}, {B.shape} do not have rank {rank}")
    if (B.shape[0], A.shape[0]) != base.shape:
        raise ShapeError(f"LoRA delta {(B.shape[0], A.shape[0])} does not match base {base.shape}")
    return nx.add(base, nx.scale(nx.matmul(B, nx.transpose(A)), alpha / rank))


# ---------------------------------------------------------------- pooling


def _pool_heads(x: Tensor, adapters: AdapterSet, n_heads: int, key_mask: np.ndarray | None) -> Tensor:
    B, P, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (B, P, n_heads, dh)), (0, 2, 1, 3))

    q = nx.matmul(adapters["pool.query"], adapters["pool.wq"])  # [1, d]
    qh = nx.expand(nx.transpose(nx.reshape(q, (1, n_heads, dh)), (1, 0, 2)), B)  # [B, H, 1, dh]
    k = heads(nx.matmul(x, adapters["pool.wk"]))
    v = heads(nx.matmul(x, adapters["pool.wv"]))
    scores = nx.scale(nx.matmul(qh, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    m = None if key_mask is None else key_mask[:, None, None, :]
    att = nx.softmax_row(scores, m)
    ctx = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, d))
    return nx.matmul(ctx, adapters["pool.wo"])


def pool_batch(
    x: Tensor, adapters: AdapterSet, n_heads: int, mode: str = "attention", key_mask: np.ndarray | None = None
) -> Tensor:
    """Reduce ``[B, P, d]`` outputs to unit-norm ``[B, d_joint]`` embeddings."""
    B, P, _ = x.shape
    if P == 0:
        raise ValueError("nothing to pool: zero positions")
    if mode == "attention":
        pooled = _pool_heads(x, adapters, n_heads, key_mask)
    elif key_mask is None:
        pooled = nx.mean(x, axis=1)
    else:
        w = key_mask / key_mask.sum(axis=1, keepdims=True)
        pooled = nx.reshape(nx.matmul(Tensor(w[:, None, :]), x), (B, x.shape[2]))
    return nx.l2_normalize_rows(nx.matmul(pooled, adapters["out_proj"]))


def attention_pool(prompt_outputs: Tensor, adapters: AdapterSet, n_heads: int) -> Tensor:
    """Pool one caption's ``[P, d_model]`` prompt outputs into a unit ``[d_joint]`` vector."""
    if prompt_outputs.ndim != 2 or prompt_outputs.shape[0] == 0:
        raise ValueError("attention_pool needs a non-empty [P, d_model] input")
    x = nx.reshape(prompt_outputs, (1,) + prompt_outputs.shape)
    out = pool_batch(x, adapters, n_heads, "attention")
    return nx.reshape(out, (out.shape[1],))


# ---------------------------------------------------------------- encoder


@dataclass
class EncoderOutput:
    embeddings: Tensor  # [B, d_joint], unit rows
    hidden: list[np.ndarray] | None  # per layer, [B, L, d_model]
    text_slice: slice  # positions of (padded) text tokens in the sequence
    lengths: list[int]


class TextEncoder:
    """Frozen base transformer plus tokenizer; adapters are passed per call."""

    def __init__(
        self, config: EncoderConfig, tokenizer: Tokenizer | None = None, base: dict[str, Tensor] | None = None
    ):
        self.tokenizer = tokenizer or Tokenizer.default()
        if config.vocab_size != self.tokenizer.vocab_size:
            raise ValueError(
                f"config vocab_size={config.vocab_size} but tokenizer has {self.tokenizer.vocab_size} tokens"
            )
        self.config = config
        self.base = base if base is not None else init_base_weights(config)
        self.text_encodings = 0

    def tokenize(self, text: str) -> TokenSequence:
        return self.tokenizer.encode(text)

    def init_adapters(self, seed: int = 0) -> AdapterSet:
        return init_adapters(self.config, seed, self.base)

    def _check_lengths(self, seqs: Sequence[TokenSequence]) -> list[TokenSequence]:
        out = []
        for i, s in enumerate(seqs):
            if len(s) == 0:
                raise ValueError(f"caption {i} is empty")
            if len(s) > self.config.max_text_len:
                if not self.config.truncate:
                    raise ValueError(
                        f"caption {i} has {len(s)} tokens, more than max_text_len={self.config.max_text_len}"
                    )
                s = TokenSequence(s.ids[: self.config.max_text_len], s.text)
            out.append(s)
        return out

    def build_inputs(self, seqs: Sequence[TokenSequence], adapters: AdapterSet) -> tuple[Tensor, list[int], int]:
        seqs = self._check_lengths(seqs)
        lengths = [len(s) for s in seqs]
        t_max = max(lengths)
        ids = np.full((len(seqs), t_max), self.tokenizer.pad_id, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s.ids
        text = Tensor(self.base["tok_emb"].data[ids] + self.base["pos_emb"].data[:t_max])
        parts = []
        B = len(seqs)
        if self.config.prefix_count:
            parts.append(nx.expand(adapters["prefix"], B))
        parts.append(text)
        if self.config.prompt_count:
            parts.append(nx.expand(adapters["prompts"], B))
        x = nx.concat(parts, axis=1) if len(parts) > 1 else text
        return x, lengths, t_max

    def forward(
        self,
        seqs: Sequence[TokenSequence],
        adapters: AdapterSet,
        train: bool = False,
        rng: np.random.Generator | None = None,
        use_lora: bool = True,
        return_hidden: bool = False,
    ) -> EncoderOutput:
        cfg = self.config
        if len(seqs) == 0:
            raise ValueError("no captions to encode")
        x, lengths, t_max = self.build_inputs(seqs, adapters)
        Q, P = cfg.prefix_count, cfg.prompt_count
        mask = batch_mask(lengths, t_max, Q, P)
        lora = cfg.lora if use_lora else None
        if train and lora is not None and lora.dropout > 0 and rng is None:
            raise ValueError("training with LoRA dropout needs an rng")

        def param(name: str) -> Tensor:
            t = adapters.get(name)
            return t if t is not None else self.base[name]

        def project(layer: int, which: str, h: Tensor) -> Tensor:
            w0 = self.base[f"layers.{layer}.attn.{which}"]
            key = f"lora.{layer}.{which}"
            if lora is None or which not in lora.targets or key + ".A" not in adapters:
                return nx.matmul(h, nx.transpose(w0))
            A, B = adapters[key + ".A"], adapters[key + ".B"]
            if train and lora.dropout > 0:
                keep = (rng.random(h.shape) >= lora.dropout) / (1.0 - lora.dropout)
                delta = nx.matmul(nx.matmul(nx.mul_const(h, keep), A), nx.transpose(B))
                return nx.add(nx.matmul(h, nx.transpose(w0)), nx.scale(delta, lora.scaling))
            w = effective_weight(w0, (A, B), lora.alpha, lora.rank)
            return nx.matmul(h, nx.transpose(w))

        hidden: list[np.ndarray] | None = [] if return_hidden else None
        out = run_blocks(x, mask, cfg.n_layers, cfg.n_heads, param, project, hidden)
        if hidden is not None:
            hidden.append(out.data)
        if P:
            pooled_in = nx.getitem(out, (slice(None), slice(Q + t_max, None)))
            key_mask = None
        else:
            pooled_in = nx.getitem(out, (slice(None), slice(Q, Q + t_max)))
            key_mask = np.arange(t_max)[None, :] < np.asarray(lengths)[:, None]
        emb = pool_batch(pooled_in, adapters, cfg.n_heads, cfg.pooling_mode, key_mask)
        self.text_encodings += len(seqs)
        return EncoderOutput(emb, hidden, slice(Q, Q + t_max), lengths)

    def encode(self, texts: Sequence[str | TokenSequence], adapters: AdapterSet, **kw) -> Tensor:
        seqs = [self.tokenize(t) if isinstance(t, str) else t for t in texts]
        return self.forward(seqs, adapters, **kw).embeddings


def build_input(tokens: TokenSequence, adapters: AdapterSet, encoder: TextEncoder) -> Tensor:
    """Embedded ``[prefix; text; prompts]`` sequence for one caption, ``[L, d_model]``."""
    x, _, _ = encoder.build_inputs([tokens], adapters)
    return nx.reshape(x, x.shape[1:])


def encode_text(tokens: TokenSequence, adapters: AdapterSet, encoder: TextEncoder, **kw) -> Tensor:
    """Unit-norm joint-space embedding ``[d_joint]`` for one caption."""
    emb = encoder.forward([tokens], adapters, **kw).embeddings
    return nx.reshape(emb, (emb.shape[1],))
