"""Adapter training: decoupled weight decay, warmup + cosine schedule, clipping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .datakit import plain_caption, wrap_caption
from .encoder import MAX_LOG_TAU, AdapterSet, TextEncoder, is_decay_exempt
from .numerics import NonFiniteError
from .objectives import LossConfig, LossReport, total_loss
from .vision import ImageRecord, TeacherProvider, VisionProvider

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "img2txt", "txt2img", "distill", "total", "tau")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 5e-4
    weight_decay: float = 0.5
    grad_clip_norm: float = 1.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.peak_lr < 0 or self.weight_decay < 0 or self.grad_clip_norm <= 0:
            raise ValueError("rates must be non-negative and grad_clip_norm positive")


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then half-cosine decay to 0."""
    total, warm, peak = config.total_steps, config.warmup_steps, config.peak_lr
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warm:
        return peak * step / warm
    if total == warm:
        return peak
    progress = (step - warm) / (total - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``.

    Returns the (possibly) rescaled gradients and the norm before clipping.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name} is not finite; step aborted")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    clipped = {k: g * factor for k, g in grads.items()}
    # a last-ulp overshoot is possible after the multiply; shave it off
    post = global_norm(clipped)
    if post > max_norm:
        clipped = {k: g * (max_norm / post) for k, g in clipped.items()}
    return clipped, norm


class AdamW:
    """Adaptive moments with weight decay decoupled from the gradient step."""

    def __init__(self, adapters: AdapterSet, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(adapters[k].data) for k in adapters}
        self.v = {k: np.zeros_like(adapters[k].data) for k in adapters}
        self.step_count = 0

    def step(self, adapters: AdapterSet, grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, g in grads.items():
            p = adapters[name]
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and not is_decay_exempt(name):
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update
        if "log_tau" in adapters.tensors:
            lt = adapters["log_tau"]
            if lt.data > MAX_LOG_TAU:
                lt.data = np.array(MAX_LOG_TAU)


@dataclass
class TrainResult:
    adapters: AdapterSet
    metrics: list[dict]
    checkpoints: list[Path]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: Path | None):
        where = f"; last good checkpoint: {last_good}" if last_good else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step
        self.last_good = last_good


def format_metrics_header() -> str:
    return "\t".join(METRIC_FIELDS) + "\n"


def format_metrics(row: dict) -> str:
    vals = [str(row["step"])] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]]
    return "\t".join(vals) + "\n"


def read_metrics(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != list(METRIC_FIELDS):
        raise ValueError(f"{path}: missing metrics header")
    out = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        row = {"step": int(parts[0])}
        row.update({k: float(v) for k, v in zip(METRIC_FIELDS[1:], parts[1:])})
        out.append(row)
    return out


CAPTION_MODES = ("wrapper", "raw")


def caption_text(caption: str, mode: str) -> str:
    """Training-side text: wrapped (adapted LM) or verbatim (from-scratch baseline)."""
    if mode == "wrapper":
        return wrap_caption(caption)
    if mode == "raw":
        return caption
    raise ValueError(f"unknown caption mode {mode!r}")


def class_prompt(label: str, mode: str) -> str:
    """Evaluation-side text for a class name, matching the training mode."""
    if mode == "wrapper":
        return wrap_caption(label)
    if mode == "raw":
        return plain_caption(label)
    raise ValueError(f"unknown caption mode {mode!r}")


def train(
    config: TrainConfig,
    dataset: Sequence[ImageRecord],
    encoder: TextEncoder,
    vision: VisionProvider,
    teacher: TeacherProvider | None = None,
    adapters: AdapterSet | None = None,
    out_dir: str | Path | None = None,
    caption_mode: str = "wrapper",
    use_lora: bool = True,
) -> TrainResult:
    """Optimise an AdapterSet against frozen image embeddings.

    Each step samples a batch (epoch-wise permutation), encodes its distinct
    captions, computes the total loss, clips, and applies AdamW to the
    adapters only. Duplicate captions within a batch share one encoding, so
    they also share a LoRA dropout mask.
    With ``out_dir`` the metrics log and periodic checkpoints are written there.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if vision.d_joint != encoder.config.d_joint:
        raise ValueError(f"vision d_joint={vision.d_joint} != encoder d_joint={encoder.config.d_joint}")
    adapters = adapters.copy() if adapters is not None else encoder.init_adapters(config.seed)
    rng = np.random.default_rng([config.seed, 11])
    drop_rng = np.random.default_rng([config.seed, 12])
    opt = AdamW(adapters, config.beta1, config.beta2, config.eps, config.weight_decay)

    images = vision.embed_images(dataset)
    texts = [caption_text(r.caption, caption_mode) for r in dataset]
    # identical captions are encoded once per step and gathered back
    caption_ids: dict[str, int] = {}
    text_id = np.array([caption_ids.setdefault(t, len(caption_ids)) for t in texts])
    uniq_seqs = [encoder.tokenize(t) for t in caption_ids]
    teacher_img = teacher.embed_images(dataset) if teacher is not None else None
    teacher_txt = teacher.embed_texts([r.caption for r in dataset]) if teacher is not None else None

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    checkpoints: list[Path] = []
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.tsv", "w", encoding="utf-8", newline="\n")
        metrics_fh.write(format_metrics_header())
    last_good = adapters.copy()
    last_good_path: Path | None = None
    metrics: list[dict] = []
    order = np.empty(0, dtype=np.int64)
    n = len(dataset)
    bs = min(config.batch_size, n)
    try:
        for step in range(1, config.total_steps + 1):
            if len(order) < bs:
                order = np.concatenate([order, rng.permutation(n)])
            idx, order = order[:bs], order[bs:]
            V = nx.Tensor(images[idx])
            uniq, inverse = np.unique(text_id[idx], return_inverse=True)
            emb = encoder.forward([uniq_seqs[u] for u in uniq], adapters, train=True, rng=drop_rng, use_lora=use_lora).embeddings
            T = emb if len(uniq) == len(idx) else nx.getitem(emb, inverse)
            S_t = teacher_img[idx] @ teacher_txt[idx].T if teacher is not None else None
            try:
                loss, report = total_loss(V, T, S_t, adapters, config.loss)
            except NonFiniteError:
                raise TrainingDiverged(step, _save_last_good(out, last_good, last_good_path)) from None
            names = adapters.names()
            grads = dict(zip(names, nx.grad(loss, adapters.parameters())))
            grads, _ = clip_gradients(grads, config.grad_clip_norm)
            lr = lr_at(step, config)
            opt.step(adapters, grads, lr)
            row = {"step": step, "lr": lr, **_report_fields(report)}
            metrics.append(row)
            if metrics_fh is not None:
                metrics_fh.write(format_metrics(row))
            last_good = adapters.copy()
            if out is not None and config.eval_every and step % config.eval_every == 0:
                path = out / "checkpoints" / f"step_{step:06d}.clmp"
                adapters.save(path)
                checkpoints.append(path)
                last_good_path = path
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out is not None:
        final = out / "checkpoints" / "final.clmp"
        adapters.save(final)
        checkpoints.append(final)
    return TrainResult(adapters, metrics, checkpoints)


def _report_fields(r: LossReport) -> dict:
    return {"img2txt": r.img2txt, "txt2img": r.txt2img, "distill": r.distill, "total": r.total, "tau": r.tau}


def _save_last_good(out: Path | None, adapters: AdapterSet, path: Path | None) -> Path | None:
    if out is None:
        return path
    p = out / "checkpoints" / "last_good.clmp"
    adapters.save(p)
    return p


def evaluate(
    encoder: TextEncoder,
    adapters: AdapterSet,
    vision: VisionProvider,
    records: Sequence[ImageRecord],
    class_names: Sequence[str],
    caption_mode: str = "wrapper",
    use_lora: bool = True,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Zero-shot accuracy with class-text embeddings computed once and cached.

    Returns ``(accuracy, predictions, class_embeddings)``.
    """
    from .objectives import classify_batch

    class_texts = [class_prompt(c, caption_mode) for c in class_names]
    class_emb = encoder.encode(class_texts, adapters, use_lora=use_lora).data
    img = vision.embed_images(records)
    pred = classify_batch(img, class_emb)
    labels = np.array([r.class_id for r in records])
    return float(np.mean(pred == labels)), pred, class_emb
