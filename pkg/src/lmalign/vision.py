"""Frozen image tower and frozen distillation teacher.

Images are precomputed feature records rather than pixels. Both providers
return plain numpy arrays, so nothing they emit can carry a gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tokenizer import split_words

EMBED_MAGIC = b"CLEM"
EMBED_VERSION = 1
VISION_MODES = ("prototype", "linear-random")


@dataclass(frozen=True)
class ImageRecord:
    image_ref: int
    class_id: int
    caption: str
    features: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, ImageRecord)
            and (self.image_ref, self.class_id, self.caption) == (other.image_ref, other.class_id, other.caption)
            and self.features.tobytes() == other.features.tobytes()
        )

    __hash__ = None


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("cannot normalise a zero feature vector")
    return x / norms


def make_prototypes(n_classes: int, dim: int, seed: int, orthogonal: bool = True) -> np.ndarray:
    """Unit class prototypes; exactly orthonormal when ``orthogonal``."""
    rng = np.random.default_rng([seed, 0])
    g = rng.standard_normal((dim, n_classes))
    if orthogonal:
        if dim < n_classes:
            raise ValueError(f"d_joint={dim} < {n_classes} classes: orthogonal prototypes impossible")
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        return np.ascontiguousarray(q.T)
    return _unit_rows(g.T)


class VisionProvider:
    """Deterministic stand-in for a frozen pretrained image encoder."""

    def __init__(
        self,
        d_joint: int,
        mode: str = "prototype",
        class_prototypes: np.ndarray | None = None,
        seed: int = 0,
        d_in: int | None = None,
    ):
        if mode not in VISION_MODES:
            raise ValueError(f"mode must be one of {VISION_MODES}")
        self.d_joint = d_joint
        self.mode = mode
        self.seed = seed
        if mode == "prototype":
            if class_prototypes is None or class_prototypes.shape[1] != d_joint:
                raise ValueError("prototype mode needs class_prototypes of width d_joint")
            self.class_prototypes = np.array(class_prototypes, dtype=np.float64)
            self.class_prototypes.setflags(write=False)
            self.d_in = d_joint
        else:
            self.class_prototypes = None
            self.d_in = d_in if d_in is not None else d_joint
            rng = np.random.default_rng([seed, 2])
            self.projection = rng.standard_normal((d_joint, self.d_in)) / np.sqrt(self.d_in)
            self.projection.setflags(write=False)

    @property
    def n_classes(self) -> int:
        return 0 if self.class_prototypes is None else self.class_prototypes.shape[0]

    def raw_features(self, records: Sequence[ImageRecord]) -> np.ndarray:
        """Un-normalised image content, ``[n, d_joint]``."""
        feats = np.stack([np.asarray(r.features, dtype=np.float64) for r in records])
        if feats.shape[1] != self.d_in:
            raise ValueError(f"feature dimension {feats.shape[1]} != provider input {self.d_in}")
        if self.mode == "prototype":
            ids = np.array([r.class_id for r in records])
            if ids.min() < 0 or ids.max() >= self.n_classes:
                bad = int(ids[(ids < 0) | (ids >= self.n_classes)][0])
                raise KeyError(f"unknown class id {bad}")
            return self.class_prototypes[ids] + feats
        return feats @ self.projection.T

    def embed_images(self, records: Sequence[ImageRecord]) -> np.ndarray:
        return _unit_rows(self.raw_features(records))

    def embed_image(self, record: ImageRecord) -> np.ndarray:
        return self.embed_images([record])[0]


class TeacherProvider:
    """Frozen teacher: a second, independently seeded pair of linear embedders.

    With ``class_names`` given, the text side recognises a class name in the
    caption and embeds that class's prototype through the same map as the
    image side, so teacher similarities encode the true class structure.
    Without it, captions are embedded as a seeded bag of random word vectors.
    """

    def __init__(
        self,
        vision: VisionProvider,
        d_teacher: int,
        seed: int = 1,
        class_names: Sequence[str] | None = None,
    ):
        self.vision = vision
        self.d_teacher = d_teacher
        self.seed = seed
        rng = np.random.default_rng([seed, 3])
        self.image_map = rng.standard_normal((d_teacher, vision.d_joint)) / np.sqrt(vision.d_joint)
        self.text_map = rng.standard_normal((d_teacher, vision.d_joint)) / np.sqrt(vision.d_joint)
        self.image_map.setflags(write=False)
        self.text_map.setflags(write=False)
        self.lexicon = {n.lower(): i for i, n in enumerate(class_names)} if class_names else None
        if self.lexicon is not None and vision.class_prototypes is None:
            raise ValueError("class-aware teacher needs a prototype-mode vision provider")

    def _word_vector(self, word: str) -> np.ndarray:
        key = int.from_bytes(word.encode("utf-8")[:32].ljust(32, b"\0"), "little") % (2**63)
        return np.random.default_rng([self.seed, 4, key, len(word)]).standard_normal(self.vision.d_joint)

    def embed_images(self, records: Sequence[ImageRecord]) -> np.ndarray:
        return _unit_rows(self.vision.raw_features(records) @ self.image_map.T)

    def embed_texts(self, captions: Sequence[str]) -> np.ndarray:
        rows = []
        for cap in captions:
            words = split_words(cap)
            cid = None
            if self.lexicon is not None:
                cid = next((self.lexicon[w] for w in words if w in self.lexicon), None)
            if cid is not None:
                rows.append(self.vision.class_prototypes[cid] @ self.image_map.T)
            else:
                feat = np.sum([self._word_vector(w) for w in words], axis=0) if words else None
                if feat is None:
                    raise ValueError("cannot embed an empty caption")
                rows.append(feat @ self.text_map.T)
        return _unit_rows(np.stack(rows))


def teacher_similarity(
    teacher: TeacherProvider, images: Sequence[ImageRecord], captions: Sequence[str]
) -> np.ndarray:
    """``[n, n]`` teacher image-text dot products, before any temperature."""
    if len(images) != len(captions):
        raise ValueError(f"{len(images)} images but {len(captions)} captions")
    if not images:
        raise ValueError("empty batch")
    return teacher.embed_images(images) @ teacher.embed_texts(captions).T


# ---------------------------------------------------------------- CLEM file


def write_embeddings(path: str | Path, records: Sequence[ImageRecord]) -> None:
    """CLEM layout, little-endian: magic, u32 version, u64 count, u32 dim, then
    per record u32 class_id, u32 caption byte length, UTF-8 caption, dim x f64."""
    dim = len(records[0].features) if records else 0
    parts = [EMBED_MAGIC, struct.pack("<IQI", EMBED_VERSION, len(records), dim)]
    for r in records:
        if len(r.features) != dim:
            raise ValueError(f"record {r.image_ref} has {len(r.features)} features, expected {dim}")
        cap = r.caption.encode("utf-8")
        parts.append(struct.pack("<II", r.class_id, len(cap)))
        parts.append(cap)
        parts.append(np.ascontiguousarray(r.features, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path: str | Path) -> list[ImageRecord]:
    buf = Path(path).read_bytes()
    if buf[:4] != EMBED_MAGIC:
        raise ValueError(f"{path}: not an embedding file (bad magic)")
    version, count, dim = struct.unpack_from("<IQI", buf, 4)
    if version != EMBED_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 4 + 16
    out = []
    try:
        for i in range(count):
            cid, n = struct.unpack_from("<II", buf, pos)
            pos += 8
            cap = buf[pos : pos + n].decode("utf-8")
            pos += n
            if pos + 8 * dim > len(buf):
                raise ValueError(f"{path}: truncated at record {i}")
            feats = np.frombuffer(buf, dtype="<f8", count=dim, offset=pos).astype(np.float64)
            pos += 8 * dim
            out.append(ImageRecord(i, cid, cap, feats))
    except struct.error as exc:
        raise ValueError(f"{path}: truncated at byte {pos}") from exc
    return out
