"""Contrastive and distillation losses, and the zero-shot decision rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import NonFiniteError, ShapeError, Tensor

REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class LossConfig:
    tau_distill: float = 1.0
    distill_weight: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if not self.tau_distill > 0:
            raise ValueError("tau_distill must be positive")
        if self.distill_weight < 0:
            raise ValueError("distill_weight must be non-negative")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")


@dataclass(frozen=True)
class LossReport:
    img2txt: float
    txt2img: float
    contrastive: float
    distill: float
    total: float
    tau: float


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce(per_row: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return nx.sum(per_row)
    if reduction == "mean":
        return nx.mean(per_row)
    raise ValueError(f"unknown reduction {reduction!r}")


def _diag_mask(n: int) -> np.ndarray:
    return np.eye(n)


def similarity(V, T) -> Tensor:
    """``S[i, j] = v_i . t_j`` with images on rows and texts on columns."""
    V, T = _as_t(V), _as_t(T)
    if V.ndim != 2 or T.ndim != 2 or V.shape != T.shape:
        raise ShapeError(f"image batch {V.shape} and text batch {T.shape} must match")
    return nx.matmul(V, nx.transpose(T))


def contrastive_loss(V, T, tau, reduction: str = "mean") -> tuple[Tensor, Tensor]:
    """Image-to-text and text-to-image cross-entropy toward matched pairs.

    ``tau`` multiplies the similarities (it is an inverse temperature) and may
    be a float or a scalar tensor. Returns ``(img2txt, txt2img)``.
    """
    V, T = _as_t(V), _as_t(T)
    n = V.shape[0]
    if n == 0:
        raise ValueError("contrastive_loss needs at least one pair")
    for name, x in (("images", V), ("texts", T)):
        if not np.all(np.isfinite(x.data)):
            raise NonFiniteError(f"{name} contain non-finite values")
    S = similarity(V, T)
    tau_t = tau if isinstance(tau, Tensor) else Tensor(float(tau))
    if not tau_t.data > 0:
        raise ValueError("tau must be positive")
    logits = nx.scale_by(S, tau_t)
    eye = _diag_mask(n)
    i2t = nx.scale(nx.sum(nx.mul_const(nx.log_softmax_row(logits), eye), axis=1), -1.0)
    t2i = nx.scale(nx.sum(nx.mul_const(nx.log_softmax_row(nx.transpose(logits)), eye), axis=1), -1.0)
    return _reduce(i2t, reduction), _reduce(t2i, reduction)


def _row_kl(teacher: np.ndarray, student: Tensor, tau_d: float) -> Tensor:
    log_p = nx.log_softmax_np(tau_d * teacher)
    p = np.exp(log_p)
    log_q = nx.log_softmax_row(nx.scale(student, tau_d))
    # sum_j p (log p - log q), per row
    return nx.sum(nx.mul_const(nx.sub(Tensor(log_p), log_q), p), axis=1)


def distillation_loss(S_s, S_t, tau_d: float = 1.0, reduction: str = "sum") -> Tensor:
    """Row-wise plus column-wise KL(teacher softmax || student softmax).

    Both matrices are pre-temperature similarities; ``tau_d`` scales both.
    ``reduction="sum"`` sums over rows and columns, ``"mean"`` divides each
    direction by ``n``.
    """
    S_s = _as_t(S_s)
    S_t = S_t.data if isinstance(S_t, Tensor) else np.asarray(S_t, dtype=np.float64)
    if S_s.shape != S_t.shape or S_s.ndim != 2 or S_s.shape[0] != S_s.shape[1]:
        raise ShapeError(f"similarity matrices must be equal squares, got {S_s.shape} and {S_t.shape}")
    if not tau_d > 0:
        raise ValueError("tau_d must be positive")
    rows = _row_kl(S_t, S_s, tau_d)
    cols = _row_kl(S_t.T, nx.transpose(S_s), tau_d)
    return nx.add(_reduce(rows, reduction), _reduce(cols, reduction))


def total_loss(V, T, teacher_S, adapters, config: LossConfig) -> tuple[Tensor, LossReport]:
    """Contrastive loss plus weighted distillation.

    The learned inverse temperature is ``exp(adapters.log_tau)``; the
    distillation term uses raw cosine similarities and ``tau_distill`` only.
    """
    tau = nx.exp(adapters.log_tau)
    i2t, t2i = contrastive_loss(V, T, tau, config.reduction)
    contrastive = nx.add(i2t, t2i)
    total = contrastive
    distill_value = 0.0
    if teacher_S is not None:
        S_s = similarity(V, T)
        distill = distillation_loss(S_s, teacher_S, config.tau_distill, config.reduction)
        distill_value = distill.item()
        if config.distill_weight != 0:
            total = nx.add(contrastive, nx.scale(distill, config.distill_weight))
    report = LossReport(
        img2txt=i2t.item(),
        txt2img=t2i.item(),
        contrastive=contrastive.item(),
        distill=distill_value,
        total=total.item(),
        tau=tau.item(),
    )
    for k, v in report.__dict__.items():
        if not np.isfinite(v):
            raise NonFiniteError(f"loss term {k} is not finite")
    return total, report


def classify(x, class_embeddings) -> int:
    """Index of the class with the largest dot product; ties go to the lowest index."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    C = np.asarray(class_embeddings.data if isinstance(class_embeddings, Tensor) else class_embeddings)
    if C.ndim != 2 or C.shape[0] == 0:
        raise ValueError("need at least one class embedding")
    if C.shape[1] != x.shape[-1]:
        raise ShapeError(f"embedding width {x.shape[-1]} != class width {C.shape[1]}")
    return int(np.argmax(C @ x))


def classify_batch(X, class_embeddings) -> np.ndarray:
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    C = np.asarray(class_embeddings.data if isinstance(class_embeddings, Tensor) else class_embeddings)
    if C.ndim != 2 or C.shape[0] == 0:
        raise ValueError("need at least one class embedding")
    if C.shape[1] != X.shape[1]:
        raise ShapeError(f"embedding width {X.shape[1]} != class width {C.shape[1]}")
    return np.argmax(X @ C.T, axis=1)
