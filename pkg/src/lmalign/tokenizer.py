"""Deterministic word-level tokenizer over a fixed vocabulary file."""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

PAD = "<pad>"
UNK = "<unk>"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    """Lowercase, then split into word runs and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    text: str = ""

    def __len__(self):
        return len(self.ids)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


class Tokenizer:
    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        for special in (PAD, UNK):
            if special not in tokens:
                raise ValueError(f"vocabulary is missing {special}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]

    @classmethod
    def from_file(cls, path: str | Path) -> Tokenizer:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])

    @classmethod
    def default(cls) -> Tokenizer:
        text = resources.files("lmalign.data").joinpath("vocab.txt").read_text(encoding="utf-8")
        return cls([ln for ln in text.splitlines() if ln])

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> TokenSequence:
        ids = tuple(self.index.get(w, self.unk_id) for w in split_words(text))
        return TokenSequence(ids, text)

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]
