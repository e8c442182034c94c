"""Harvest a frozen encoder's final state and replay it into a decoder."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .ssm import (
    SelectiveSSM,
    StepCache,
    greedy_generate,
    lm_forward,
    read_container,
    write_container,
)
from .tokenizer import BOS, EOS

DEFAULT_MAX_TOKENS = 300


class FingerprintError(ValueError):
    """Latent state and model configuration do not match."""


@dataclass
class LatentState:
    """Per-layer ``(beta_C, beta_S)`` pairs for a batch of encoded sequences.

    ``conv[i]`` is ``[B, d_inner, d_conv]`` and ``ssm[i]`` is
    ``[B, d_inner, d_state]``; neither depends on the sequence length.
    """

    conv: list[torch.Tensor]
    ssm: list[torch.Tensor]
    source_length: int
    fingerprint: str

    @property
    def n_layers(self) -> int:
        return len(self.ssm)

    @property
    def batch_size(self) -> int:
        return self.ssm[0].shape[0]

    @property
    def nbytes(self) -> int:
        return sum(t.numel() * t.element_size() for t in self.conv + self.ssm)

    @classmethod
    def zeros_like(cls, model: SelectiveSSM, batch: int = 1) -> LatentState:
        cache = StepCache.zeros(model.config, batch, model.dtype)
        return cls(cache.conv, cache.ssm, 0, model.config.fingerprint())

    def save(self, path) -> str:
        tensors = {}
        for i in range(self.n_layers):
            tensors[f"layer{i}.beta_C"] = self.conv[i]
            tensors[f"layer{i}.beta_S"] = self.ssm[i]
        meta = {"source_length": self.source_length, "fingerprint": self.fingerprint}
        return write_container(path, "latent", tensors, meta)

    @classmethod
    def load(cls, path) -> LatentState:
        kind, tensors, meta = read_container(path)
        if kind != "latent":
            raise ValueError(f"{path}: expected a latent state, found {kind!r}")
        n = len(tensors) // 2
        return cls(
            conv=[tensors[f"layer{i}.beta_C"] for i in range(n)],
            ssm=[tensors[f"layer{i}.beta_S"] for i in range(n)],
            source_length=meta["source_length"],
            fingerprint=meta["fingerprint"],
        )


def _check_fingerprint(latent: LatentState, model: SelectiveSSM) -> None:
    cfg = model.config
    if latent.fingerprint != cfg.fingerprint() or latent.n_layers != cfg.n_layers:
        raise FingerprintError(
            f"latent from config {latent.fingerprint} cannot drive model {cfg.fingerprint()}"
        )
    for c, s in zip(latent.conv, latent.ssm):
        if tuple(c.shape[1:]) != cfg.conv_state_shape or tuple(s.shape[1:]) != cfg.ssm_state_shape:
            raise FingerprintError("latent tensor shapes do not match the model")


def encode(encoder: SelectiveSSM, tokens) -> LatentState:
    """Run the frozen encoder over BOS-prefixed ``tokens`` (``[T]`` or ``[B, T]``)."""
    t = torch.as_tensor(tokens, dtype=torch.long)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if t.shape[1] == 0 or bool((t[:, 0] != BOS).any()):
        raise ValueError("encoder input must start with BOS")
    with torch.no_grad():
        _, cache = lm_forward(encoder, t)
    return LatentState(cache.conv, cache.ssm, t.shape[1] - 1, encoder.config.fingerprint())


def init_decoder(latent: LatentState, decoder: SelectiveSSM) -> StepCache:
    """Decoder cache with ``h_0 := beta_S`` and conv window ``:= beta_C`` per layer."""
    _check_fingerprint(latent, decoder)
    return StepCache(
        [c.to(decoder.dtype).clone() for c in latent.conv],
        [s.to(decoder.dtype).clone() for s in latent.ssm],
    )


def read_back(cache: StepCache, fingerprint: str, source_length: int = 0) -> LatentState:
    return LatentState([c.clone() for c in cache.conv], [s.clone() for s in cache.ssm], source_length, fingerprint)


def reconstruct(latent: LatentState, decoder: SelectiveSSM, max_tokens: int = DEFAULT_MAX_TOKENS) -> list[list[int]]:
    """Greedy reconstruction for every sequence in ``latent``.

    The decoder is fed BOS from the injected state and stops at EOS (not
    emitted) or after ``max_tokens`` tokens.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    cache = init_decoder(latent, decoder)
    return greedy_generate(decoder, [BOS] * latent.batch_size, cache, max_tokens, EOS)


def decoder_from_encoder(encoder: SelectiveSSM) -> SelectiveSSM:
    """Trainable deep copy of the encoder weights."""
    decoder = copy.deepcopy(encoder)
    for p in decoder.parameters():
        p.requires_grad_(True)
    return decoder


def freeze(model: SelectiveSSM) -> SelectiveSSM:
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def encoder_continuation(encoder: SelectiveSSM, tokens, max_tokens: int = DEFAULT_MAX_TOKENS) -> list[int]:
    """The encoder's own greedy continuation of ``BOS + tokens + BOS``.

    With decoder weights equal to the encoder's, this is exactly what
    :func:`reconstruct` must produce.
    """
    seq = [BOS] + list(tokens) + [BOS]
    with torch.no_grad():
        logits, cache = lm_forward(encoder, seq)
        first = int(logits[-1].argmax())
    if first == EOS:
        return []
    rest = greedy_generate(encoder, [first], cache, max_tokens - 1, EOS)[0] if max_tokens > 1 else []
    return [first] + rest
