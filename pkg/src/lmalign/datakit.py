"""Caption templating, synthetic datasets and caption TSV ingestion."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .vision import ImageRecord, VisionProvider, make_prototypes, read_embeddings, write_embeddings

log = logging.getLogger(__name__)

SLOT = "{}"
WRAPPER_TEMPLATE = "USER: A photo of a {}. A {} has the following visual attributes.\nASSISTANT: 1."
PLAIN_TEMPLATE = "A photo of {}"
TSV_HEADER = ("image_ref", "class_id", "caption")


@dataclass(frozen=True)
class CaptionRecord:
    image_ref: str
    caption: str
    class_id: int | None = None

    def __post_init__(self):
        if not self.caption:
            raise ValueError(f"record {self.image_ref!r} has an empty caption")


class PromptTemplateSet:
    """Ordered caption templates, each with exactly one ``{}`` slot."""

    def __init__(self, templates: Sequence[str]):
        if not templates:
            raise ValueError("template set is empty")
        for t in templates:
            if t.count(SLOT) != 1:
                raise ValueError(f"template {t!r} must contain exactly one {SLOT} slot")
        self.templates = list(templates)

    def __len__(self):
        return len(self.templates)

    def __getitem__(self, i: int) -> str:
        return self.templates[i]

    @classmethod
    def from_file(cls, path: str | Path) -> PromptTemplateSet:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln.strip()])

    @classmethod
    def default(cls) -> PromptTemplateSet:
        text = resources.files("lmalign.data").joinpath("templates.txt").read_text(encoding="utf-8")
        return cls([ln for ln in text.splitlines() if ln.strip()])


def wrap_caption(caption: str) -> str:
    """Insert ``caption`` verbatim into both slots of the USER/ASSISTANT wrapper."""
    if not caption:
        raise ValueError("cannot wrap an empty caption")
    return WRAPPER_TEMPLATE.replace(SLOT, caption)


def plain_caption(label: str) -> str:
    if not label:
        raise ValueError("cannot wrap an empty label")
    return PLAIN_TEMPLATE.replace(SLOT, label)


def unwrap_caption(text: str) -> str:
    """Recover the caption from a wrapped string (for slot-free captions)."""
    head = "USER: A photo of a "
    if not text.startswith(head):
        raise ValueError("text does not start with the wrapper prefix")
    return text[len(head) : text.index(". A ", len(head))]


def label_to_caption(label: str, templates: PromptTemplateSet, index: int) -> str:
    """Apply template ``index`` (taken modulo the set size) to ``label``."""
    if index < 0:
        raise IndexError(f"template index {index} is negative")
    return templates[index % len(templates)].replace(SLOT, label)


def class_words() -> list[str]:
    text = resources.files("lmalign.data").joinpath("class_words.txt").read_text(encoding="utf-8")
    return [w for w in text.splitlines() if w]


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticDataset:
    class_names: list[str]
    records: list[ImageRecord]
    vision: VisionProvider
    noise_std: float
    seed: int
    orthogonal: bool = True

    def split(self, holdout: int, seed: int | None = None) -> tuple[list[ImageRecord], list[ImageRecord]]:
        return train_test_split(self.records, holdout, self.seed if seed is None else seed)


def train_test_split(records: Sequence, holdout: int, seed: int) -> tuple[list, list]:
    """Deterministic split; returns (train, held_out) preserving record order."""
    if not 0 <= holdout < len(records):
        raise ValueError(f"holdout={holdout} must be in [0, {len(records)})")
    rng = np.random.default_rng([seed, 7])
    test = set(rng.permutation(len(records))[:holdout].tolist())
    train = [r for i, r in enumerate(records) if i not in test]
    held = [r for i, r in enumerate(records) if i in test]
    return train, held


def gen_synthetic(
    n_classes: int,
    n_per_class: int,
    d_joint: int,
    noise_std: float,
    seed: int = 0,
    out_dir: str | Path | None = None,
    templates: PromptTemplateSet | None = None,
    orthogonal: bool = True,
) -> SyntheticDataset:
    """Class prototypes, per-record noise and templated captions.

    ``noise_std`` is the expected Euclidean norm of each record's noise
    vector (each component has std ``noise_std / sqrt(d_joint)``), so its
    meaning does not change with the embedding width.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_per_class < 1:
        raise ValueError("need at least 1 record per class")
    words = class_words()
    if n_classes > len(words):
        raise ValueError(f"only {len(words)} class names are available")
    templates = templates or PromptTemplateSet.default()
    protos = make_prototypes(n_classes, d_joint, seed, orthogonal=orthogonal)
    vision = VisionProvider(d_joint, "prototype", protos, seed)
    rng = np.random.default_rng([seed, 1])
    names = words[:n_classes]
    records = []
    ref = 0
    for c in range(n_classes):
        for _ in range(n_per_class):
            noise = rng.standard_normal(d_joint) * (noise_std / np.sqrt(d_joint))
            t_idx = int(rng.integers(len(templates)))
            records.append(ImageRecord(ref, c, label_to_caption(names[c], templates, t_idx), noise))
            ref += 1
    ds = SyntheticDataset(names, records, vision, noise_std, seed, orthogonal)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def write_dataset(ds: SyntheticDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "embeddings.clem", ds.records)
    write_tsv(out / "captions.tsv", [CaptionRecord(str(r.image_ref), r.caption, r.class_id) for r in ds.records])
    (out / "classes.txt").write_text("".join(n + "\n" for n in ds.class_names), encoding="utf-8")
    meta = (
        f"n_classes = {len(ds.class_names)}\n"
        f"d_joint = {ds.vision.d_joint}\n"
        f"noise_std = {ds.noise_std!r}\n"
        f"seed = {ds.seed}\n"
        f"orthogonal = {'true' if ds.orthogonal else 'false'}\n"
    )
    (out / "dataset.cfg").write_text(meta, encoding="utf-8")


def load_dataset(path: str | Path) -> SyntheticDataset:
    """Read a directory written by :func:`write_dataset`."""
    root = Path(path)
    meta_path = root / "dataset.cfg"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{root}: not a dataset directory (no dataset.cfg)")
    meta = {}
    for ln in meta_path.read_text(encoding="utf-8").splitlines():
        if ln.strip():
            k, _, v = ln.partition("=")
            meta[k.strip()] = v.strip()
    n_classes, d_joint, seed = int(meta["n_classes"]), int(meta["d_joint"]), int(meta["seed"])
    orthogonal = meta.get("orthogonal", "true") == "true"
    names = read_label_list(root / "classes.txt")
    if len(names) != n_classes:
        raise ValueError(f"{root}: classes.txt lists {len(names)} names, dataset.cfg says {n_classes}")
    vision = VisionProvider(d_joint, "prototype", make_prototypes(n_classes, d_joint, seed, orthogonal), seed)
    records = read_embeddings(root / "embeddings.clem")
    return SyntheticDataset(names, records, vision, float(meta["noise_std"]), seed, orthogonal)


# ---------------------------------------------------------------- TSV


def write_tsv(path: str | Path, records: Iterable[CaptionRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(TSV_HEADER) + "\n")
        for r in records:
            for field_ in (r.image_ref, r.caption):
                if "\t" in field_ or "\n" in field_:
                    raise ValueError(f"record {r.image_ref!r}: tabs/newlines cannot be written to TSV")
            cid = "" if r.class_id is None else str(r.class_id)
            fh.write(f"{r.image_ref}\t{cid}\t{r.caption}\n")
            n += 1
    return n


class TsvFormatError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def load_tsv(path: str | Path, caption_column: str = "caption", strict: bool = True) -> Iterator[CaptionRecord]:
    """Stream records from a tab-separated file with a header row.

    Malformed rows raise :class:`TsvFormatError` in strict mode and are
    logged and skipped otherwise.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        header_line = fh.readline()
        if not header_line:
            raise TsvFormatError(path, 1, "file is empty, expected a header")
        header = header_line.rstrip("\n").rstrip("\r").split("\t")
        if caption_column not in header:
            raise KeyError(f"{path}: no column {caption_column!r}; available columns: {header}")
        cap_i = header.index(caption_column)
        ref_i = header.index("image_ref") if "image_ref" in header else None
        cls_i = header.index("class_id") if "class_id" in header else None
        for lineno, line in enumerate(fh, start=2):
            row = line.rstrip("\n").rstrip("\r").split("\t")
            try:
                if len(row) != len(header):
                    raise TsvFormatError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
                caption = row[cap_i]
                if not caption:
                    raise TsvFormatError(path, lineno, "missing caption")
                cid = row[cls_i] if cls_i is not None else ""
                try:
                    class_id = int(cid) if cid else None
                except ValueError:
                    raise TsvFormatError(path, lineno, f"bad class_id {cid!r}") from None
                ref = row[ref_i] if ref_i is not None else str(lineno - 2)
            except TsvFormatError as exc:
                if strict:
                    raise
                log.warning("skipping malformed row: %s", exc)
                continue
            yield CaptionRecord(ref, caption, class_id)


def iter_column(path: str | Path, column: str = "caption") -> Iterator[str]:
    """Stream one column of a TSV, reading one line at a time."""
    for rec in load_tsv(path, column, strict=False):
        yield rec.caption


def read_label_list(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


__all__ = [
    "CaptionRecord",
    "PromptTemplateSet",
    "SyntheticDataset",
    "TsvFormatError",
    "gen_synthetic",
    "load_dataset",
    "label_to_caption",
    "load_tsv",
    "plain_caption",
    "train_test_split",
    "unwrap_caption",
    "wrap_caption",
    "write_tsv",
]

