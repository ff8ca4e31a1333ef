"""Adapter-based alignment of a frozen toy language model to image embeddings."""

from .encoder import AdapterSet, EncoderConfig, LnPrefixConfig, LoraConfig, TextEncoder
from .objectives import LossConfig, classify, contrastive_loss, distillation_loss, total_loss
from .tokenizer import Tokenizer
from .trainer import TrainConfig, evaluate, train
from .vision import ImageRecord, TeacherProvider, VisionProvider

__version__ = "0.1.0"

__all__ = [
    "AdapterSet",
    "EncoderConfig",
    "ImageRecord",
    "LnPrefixConfig",
    "LoraConfig",
    "LossConfig",
    "TeacherProvider",
    "TextEncoder",
    "Tokenizer",
    "TrainConfig",
    "VisionProvider",
    "classify",
    "contrastive_loss",
    "distillation_loss",
    "evaluate",
    "total_loss",
    "train",
]
