"""Desk-scale decoder-only transformer with anchor-based attention masks
and anchor-based keys/values cache reduction at inference."""

__version__ = "0.1.0"

from .corpus import AnchorPolicy, SegmentedText, Vocab, annotate, build_vocab
from .infer import GenerationConfig, generate, score_continuation
from .model import ModelConfig, ModelWeights, forward, init_weights, loss_and_grads
from .train import TrainConfig, compare_from_scratch, train

__all__ = [
    "AnchorPolicy",
    "GenerationConfig",
    "ModelConfig",
    "ModelWeights",
    "SegmentedText",
    "TrainConfig",
    "Vocab",
    "annotate",
    "build_vocab",
    "compare_from_scratch",
    "forward",
    "generate",
    "init_weights",
    "loss_and_grads",
    "score_continuation",
    "train",
]
