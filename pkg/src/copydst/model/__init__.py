"""Numpy encoder, heads, joint loss and trainer."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .gradcheck import grad_check
from .heads import joint_loss
from .network import DSTModel, EncoderOutput
from .train import corpus_jga, lr_at, predict_corpus, train

__all__ = [
    "DSTModel",
    "EncoderOutput",
    "TrainConfig",
    "corpus_jga",
    "grad_check",
    "joint_loss",
    "load_checkpoint",
    "lr_at",
    "predict_corpus",
    "save_checkpoint",
    "train",
]
