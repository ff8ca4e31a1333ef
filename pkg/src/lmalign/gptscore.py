"""Likelihood-scoring baseline: an image-conditioned toy LM used as a classifier.

The image embedding is projected to a single prefix token; each class caption
is scored by its mean per-token log-probability given the image and the
preceding tokens. Every (image, class) pair costs one LM forward pass, which
``ScoreReport.forward_passes`` counts exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import causal_mask, init_transformer, run_blocks
from .numerics import Tensor
from .tokenizer import TokenSequence, Tokenizer


@dataclass
class ScoreReport:
    scores: list[float]
    forward_passes: int = 0


@dataclass
class GptScoreResult:
    predictions: np.ndarray
    scores: np.ndarray  # [n_images, n_classes]
    forward_passes: int


class ToyConditionalLM:
    def __init__(
        self,
        vocab_size: int,
        d_image: int,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        max_len: int = 64,
        seed: int = 0,
    ):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        rng = np.random.default_rng([seed, 21])
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_len = max_len
        self.weights = init_transformer(rng, vocab_size, d_model, n_layers, 4 * d_model, max_len)
        self.weights["image_proj"] = Tensor(rng.standard_normal((d_image, d_model)))
        self.weights["unembed"] = Tensor(rng.standard_normal((d_model, vocab_size)) / np.sqrt(d_model))
        self.forward_passes = 0

    def zero_logits(self) -> None:
        """Make every next-token distribution uniform."""
        self.weights["unembed"] = Tensor(np.zeros((self.d_model, self.vocab_size)))

    def logits(self, image: np.ndarray, ids: Sequence[int]) -> np.ndarray:
        """Next-token logits ``[len(ids) + 1, vocab]`` for ``[image; ids]``.

        Row ``i`` is the distribution over the token following position ``i``.
        """
        w = self.weights
        L = len(ids) + 1
        if L > self.max_len:
            raise ValueError(f"sequence of {L} positions exceeds max_len={self.max_len}")
        prefix = np.asarray(image, dtype=np.float64) @ w["image_proj"].data
        tok = w["tok_emb"].data[np.asarray(ids, dtype=np.int64)] if len(ids) else np.zeros((0, self.d_model))
        x = np.concatenate([prefix[None, :], tok], axis=0) + w["pos_emb"].data[:L]
        mask = causal_mask([L], L)

        def project(layer, which, h):
            return nx.matmul(h, nx.transpose(w[f"layers.{layer}.attn.{which}"]))

        out = run_blocks(Tensor(x[None]), mask, self.n_layers, self.n_heads, w.__getitem__, project)
        self.forward_passes += 1
        return out.data[0] @ w["unembed"].data

    def next_token_distribution(self, image: np.ndarray, ids: Sequence[int]) -> np.ndarray:
        return np.exp(nx.log_softmax_np(self.logits(image, ids)))


def sequence_score(lm: ToyConditionalLM, image: np.ndarray, tokens: TokenSequence | Sequence[int]) -> float:
    """Mean log P(t_i | t_<i, image) over all caption tokens (one forward pass)."""
    ids = list(tokens.ids if isinstance(tokens, TokenSequence) else tokens)
    if not ids:
        raise ValueError("cannot score an empty sequence")
    logp = nx.log_softmax_np(lm.logits(image, ids[:-1]))
    return float(np.mean(logp[np.arange(len(ids)), ids]))


def gptscore_classify(
    lm: ToyConditionalLM, image: np.ndarray, class_captions: Sequence[TokenSequence]
) -> tuple[int, ScoreReport]:
    """Pick the class caption with the highest length-normalised log-likelihood.

    Ties go to the lowest index.
    """
    if not class_captions:
        raise ValueError("need at least one class caption")
    scores = [sequence_score(lm, image, c) for c in class_captions]
    return int(np.argmax(scores)), ScoreReport(scores, len(scores))


def gptscore_evaluate(
    lm: ToyConditionalLM, images: np.ndarray, class_captions: Sequence[TokenSequence]
) -> GptScoreResult:
    preds, rows, passes = [], [], 0
    for img in images:
        k, rep = gptscore_classify(lm, img, class_captions)
        preds.append(k)
        rows.append(rep.scores)
        passes += rep.forward_passes
    return GptScoreResult(np.array(preds), np.array(rows), passes)


def class_caption_tokens(tokenizer: Tokenizer, class_names: Sequence[str], template: str = "A photo of {}") -> list:
    return [tokenizer.encode(template.replace("{}", c)) for c in class_names]


__all__ = [
    "GptScoreResult",
    "ScoreReport",
    "ToyConditionalLM",
    "class_caption_tokens",
    "gptscore_classify",
    "gptscore_evaluate",
    "sequence_score",
]

