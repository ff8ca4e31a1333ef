"""Concept coverage of target class labels in a caption corpus.

Chunks are produced by a deterministic rule instead of a statistical parser:
after NFC normalisation and lowercasing, text is cut at punctuation, words
from a function-word stoplist are dropped, and every maximal run of the
remaining words becomes one chunk.
"""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_MIN_COUNT = 5

_WORD = r"\w+(?:[-']\w+)*"
_SEGMENT_RE = re.compile(rf"{_WORD}(?:\s+{_WORD})*")
_WORD_RE = re.compile(_WORD)


def load_stoplist(path: str | Path | None = None) -> frozenset[str]:
    if path is None:
        text = resources.files("lmalign.data").joinpath("stoplist.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    words = (ln.strip().lower() for ln in text.splitlines())
    return frozenset(w for w in words if w and not w.startswith("#"))


DEFAULT_STOPLIST = load_stoplist()


def normalize_text(text: str) -> str:
    return unicodedata.normalize("NFC", text).lower()


def extract_chunks(text: str, stoplist: frozenset[str] = DEFAULT_STOPLIST) -> list[str]:
    """Noun-chunk stand-ins: maximal runs of non-stoplist words between punctuation."""
    chunks = []
    for seg in _SEGMENT_RE.finditer(normalize_text(text)):
        run: list[str] = []
        for w in _WORD_RE.findall(seg.group(0)):
            if w in stoplist:
                if run:
                    chunks.append(" ".join(run))
                run = []
            else:
                run.append(w)
        if run:
            chunks.append(" ".join(run))
    return chunks


@dataclass
class ConceptDictionary:
    counts: dict[str, int]
    min_count: int = DEFAULT_MIN_COUNT
    min_count_applied: bool = True

    def __len__(self):
        return len(self.counts)

    def get(self, chunk: str) -> int:
        return self.counts.get(chunk, 0)

    def to_tsv(self) -> str:
        return "".join(f"{k}\t{v}\n" for k, v in sorted(self.counts.items()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path: str | Path, min_count: int = DEFAULT_MIN_COUNT) -> ConceptDictionary:
        counts = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 'chunk<TAB>count'")
                counts[parts[0]] = int(parts[1])
        return cls(counts, min_count, True)


def count_chunks(captions: Iterable[str], stoplist: frozenset[str] = DEFAULT_STOPLIST) -> Counter:
    """Raw chunk occurrence counts; one caption in memory at a time."""
    counts: Counter = Counter()
    for cap in captions:
        for chunk in extract_chunks(cap, stoplist):
            chunk = chunk.strip()
            if chunk:
                counts[chunk] += 1
    return counts


def filter_counts(counts: Counter, min_count: int = DEFAULT_MIN_COUNT) -> ConceptDictionary:
    """Keep chunks seen at least ``min_count`` times."""
    return ConceptDictionary({k: v for k, v in counts.items() if v >= min_count}, min_count, True)


def build_concept_dict(
    corpus: Iterable[str], min_count: int = DEFAULT_MIN_COUNT, stoplist: frozenset[str] = DEFAULT_STOPLIST
) -> ConceptDictionary:
    return filter_counts(count_chunks(corpus, stoplist), min_count)


def merge_counts(shards: Iterable[Counter]) -> Counter:
    total: Counter = Counter()
    for s in shards:
        total.update(s)
    return total


def build_concept_dict_sharded(
    captions: Sequence[str],
    n_shards: int,
    min_count: int = DEFAULT_MIN_COUNT,
    stoplist: frozenset[str] = DEFAULT_STOPLIST,
) -> ConceptDictionary:
    """Count ``n_shards`` contiguous slices separately, then merge by summation."""
    if n_shards < 1:
        raise ValueError("n_shards must be positive")
    n = len(captions)
    bounds = [round(i * n / n_shards) for i in range(n_shards + 1)]
    shards = [count_chunks(captions[bounds[i] : bounds[i + 1]], stoplist) for i in range(n_shards)]
    return filter_counts(merge_counts(shards), min_count)


class CorpusReadError(ValueError):
    pass


def iter_corpus_tsv(path: str | Path, caption_column: str = "caption"):
    """Stream the caption column of a TSV corpus, reporting the failing line on error."""
    p = Path(path)
    try:
        fh = open(p, "rb")
    except OSError as exc:
        raise CorpusReadError(f"{p}: cannot open corpus: {exc}") from exc
    with fh:
        offset = 0
        header_raw = fh.readline()
        try:
            header = header_raw.decode("utf-8").rstrip("\r\n").split("\t")
        except UnicodeDecodeError as exc:
            raise CorpusReadError(f"{p}:1 (byte 0): header is not UTF-8") from exc
        if caption_column not in header:
            raise CorpusReadError(f"{p}: no column {caption_column!r}; available columns: {header}")
        col = header.index(caption_column)
        offset += len(header_raw)
        for lineno, raw in enumerate(fh, start=2):
            try:
                line = raw.decode("utf-8").rstrip("\r\n")
            except UnicodeDecodeError as exc:
                raise CorpusReadError(f"{p}:{lineno} (byte {offset}): invalid UTF-8") from exc
            offset += len(raw)
            fields = line.split("\t")
            if len(fields) <= col:
                raise CorpusReadError(f"{p}:{lineno} (byte {offset - len(raw)}): missing {caption_column!r} field")
            yield fields[col]


@dataclass
class LabelCoverage:
    label: str
    present: bool
    local_count: int


@dataclass
class CoverageReport:
    coverage: float
    count: float
    per_label: list[LabelCoverage] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["label\tpresent\tlocal_count\n"]
        lines += [f"{r.label}\t{int(r.present)}\t{r.local_count}\n" for r in self.per_label]
        lines.append(f"#coverage\t{self.coverage!r}\n")
        lines.append(f"#count\t{self.count!r}\n")
        return "".join(lines)

    def summary(self) -> str:
        n = len(self.per_label)
        covered = sum(r.present for r in self.per_label)
        return f"Coverage: {self.coverage} ({covered}/{n} labels)\nCount: {self.count}\n"


def coverage_and_count(
    labels: Sequence[str],
    concepts: ConceptDictionary,
    min_count: int | None = None,
    stoplist: frozenset[str] = DEFAULT_STOPLIST,
) -> CoverageReport:
    """A label is present when one of its chunks occurs more than ``min_count`` times.

    ``coverage`` is the fraction of present labels; ``count`` is the mean over
    labels of the summed frequencies of their above-threshold chunks.
    """
    if not labels:
        raise ValueError("label list is empty")
    threshold = concepts.min_count if min_count is None else min_count
    rows = []
    for label in labels:
        name = label.strip()
        local, present = 0, False
        for chunk in extract_chunks(name, stoplist):
            c = concepts.get(chunk)
            if c > threshold:
                local += c
                present = True
        rows.append(LabelCoverage(name.lower(), present, local))
    n = len(rows)
    return CoverageReport(sum(r.present for r in rows) / n, sum(r.local_count for r in rows) / n, rows)
