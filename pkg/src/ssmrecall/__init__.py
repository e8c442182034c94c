"""Probing how much of a text a selective state-space model's final state retains."""

__version__ = "0.1.0"

from .latent import LatentState, encode, reconstruct  # noqa: E402
from .metrics import ReconstructionRecord, levenshtein, omission_rate, rouge1_f1  # noqa: E402
from .ssm import ModelConfig, SelectiveSSM  # noqa: E402
from .tokenizer import detokenize, tokenize  # noqa: E402

__all__ = [
    "LatentState",
    "ModelConfig",
    "ReconstructionRecord",
    "SelectiveSSM",
    "detokenize",
    "encode",
    "levenshtein",
    "omission_rate",
    "reconstruct",
    "rouge1_f1",
    "tokenize",
]
