"""Experiment configuration: sectioned ``key = value`` text with a fixed schema.

``dumps`` writes a canonical form (schema order, one blank line between
sections), so ``dumps(loads(text)) == text`` for any canonical ``text``.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .encoder import EncoderConfig, LnPrefixConfig, LoraConfig
from .objectives import LossConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EncoderSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_text_len: int = 64
    n_prompts: int = 24
    pooling_mode: str = "attention"
    rpo_enabled: bool = True
    base_seed: int = 0


@dataclass
class LoraSection:
    enabled: bool = True
    rank: int = 16
    alpha: float = 16.0
    dropout: float = 0.1


@dataclass
class LnPrefixSection:
    enabled: bool = False
    n_prefix: int = 12
    train_layernorm: bool = True


@dataclass
class TrainSection:
    batch_size: int = 64
    total_steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 5e-4
    weight_decay: float = 0.5
    grad_clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 500


@dataclass
class LossSection:
    tau_distill: float = 1.0
    distill_weight: float = 1.0
    reduction: str = "mean"


@dataclass
class DataSection:
    dataset_dir: str = ""
    caption_mode: str = "wrapper"
    holdout: int = 500
    teacher: str = "structured"
    teacher_dim: int = 48
    teacher_seed: int = 1


@dataclass
class RunConfig:
    encoder: EncoderSection = field(default_factory=EncoderSection)
    lora: LoraSection = field(default_factory=LoraSection)
    ln_prefix: LnPrefixSection = field(default_factory=LnPrefixSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    data: DataSection = field(default_factory=DataSection)

    def apply_ablations(
        self,
        no_rpo: bool = False,
        mean_pool: bool = False,
        no_lora: bool = False,
        no_distill: bool = False,
        ln_prefix: bool = False,
    ) -> RunConfig:
        if no_rpo:
            self.encoder.rpo_enabled = False
        if mean_pool:
            self.encoder.pooling_mode = "mean"
        if no_lora or ln_prefix:
            self.lora.enabled = False
        if ln_prefix:
            self.ln_prefix.enabled = True
        if no_distill:
            self.loss.distill_weight = 0.0
        return self

    def encoder_config(self, vocab_size: int, d_joint: int) -> EncoderConfig:
        e = self.encoder
        lora = None
        if self.lora.enabled:
            lora = LoraConfig(self.lora.rank, self.lora.alpha, self.lora.dropout)
        lnp = None
        if self.ln_prefix.enabled:
            lnp = LnPrefixConfig(self.ln_prefix.n_prefix, self.ln_prefix.train_layernorm)
        return EncoderConfig(
            vocab_size=vocab_size,
            d_model=e.d_model,
            n_layers=e.n_layers,
            n_heads=e.n_heads,
            max_text_len=e.max_text_len,
            n_prompts=e.n_prompts,
            d_joint=d_joint,
            pooling_mode=e.pooling_mode,
            rpo_enabled=e.rpo_enabled,
            lora=lora,
            ln_prefix=lnp,
            base_seed=e.base_seed,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss.tau_distill, self.loss.distill_weight, self.loss.reduction)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            batch_size=t.batch_size,
            total_steps=t.total_steps,
            warmup_steps=t.warmup_steps,
            peak_lr=t.peak_lr,
            weight_decay=t.weight_decay,
            grad_clip_norm=t.grad_clip_norm,
            seed=t.seed,
            loss=self.loss_config(),
            eval_every=t.eval_every,
        )

    def set(self, dotted: str, raw: str) -> None:
        """Override one value, e.g. ``set("train.total_steps", "200")``."""
        sec_name, _, key = dotted.partition(".")
        sec = _section(self, sec_name)
        hints = get_type_hints(type(sec))
        if key not in hints:
            raise ConfigError(f"unknown key {dotted!r}")
        setattr(sec, key, _convert(raw, hints[key], dotted))


def _section(cfg: RunConfig, name: str):
    if name not in {f.name for f in dataclasses.fields(cfg)}:
        raise ConfigError(f"unknown section [{name}]")
    return getattr(cfg, name)


def _convert(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value {raw!r} ({exc})") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(cfg: RunConfig) -> str:
    blocks = []
    for f in dataclasses.fields(cfg):
        sec = getattr(cfg, f.name)
        lines = [f"[{f.name}]"]
        lines += [f"{sf.name} = {_format(getattr(sec, sf.name))}" for sf in dataclasses.fields(sec)]
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="\0none", strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    for sec_name in parser.sections():
        sec = _section(cfg, sec_name)
        hints = get_type_hints(type(sec))
        for key, raw in parser.items(sec_name):
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in section [{sec_name}]")
            setattr(sec, key, _convert(raw, hints[key], f"{sec_name}.{key}"))
    return cfg


def load(path: str | Path) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8", newline="\n")
