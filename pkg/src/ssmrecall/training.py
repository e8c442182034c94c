"""Encoder pretraining and the reconstruction auto-encoder training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import numerics as nx
from .latent import DEFAULT_MAX_TOKENS, decoder_from_encoder, encode, freeze, init_decoder, reconstruct
from .metrics import rouge1_f1
from .ssm import SelectiveSSM, lm_forward, param_checksum, save_model
from .tokenizer import BOS, EOS

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    sequence_length: int = 8
    learning_rate: float = 1e-5
    batch_size: int = 32
    eval_every: int = 1000
    patience_window: int = 5000
    min_f1_delta: float = 0.1
    max_gen_tokens: int = DEFAULT_MAX_TOKENS
    validation_size: int = 128
    max_steps: int = 200_000
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.eval_every > self.patience_window:
            raise ValueError("eval_every must not exceed patience_window")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")


@dataclass
class PretrainConfig:
    """Language-model pretraining of the encoder (stands in for a released checkpoint)."""

    steps: int = 1500
    learning_rate: float = 3e-3
    batch_size: int = 32
    window: int = 128
    seed: int = 0


# --- data -----------------------------------------------------------------

def chunk_stream(tokens: Sequence[int], length: int) -> list[list[int]]:
    """Non-overlapping chunks of exactly ``length`` tokens; the remainder is dropped."""
    if length < 1:
        raise ValueError("chunk length must be >= 1")
    n = len(tokens) // length
    if n == 0:
        log.warning("corpus of %d tokens is shorter than chunk length %d", len(tokens), length)
    return [list(tokens[i * length:(i + 1) * length]) for i in range(n)]


def encoder_view(chunk: Sequence[int]) -> list[int]:
    return [BOS] + list(chunk)


def decoder_target(chunk: Sequence[int]) -> list[int]:
    return list(chunk) + [EOS]


# --- early stopping ---------------------------------------------------------

@dataclass
class EarlyStopping:
    """Stop once the best validation F1 has not grown by ``min_delta`` for ``patience`` steps.

    An evaluation counts as an improvement when it beats the best score so
    far by at least ``min_delta`` (the first evaluation always does).  The
    decision depends only on the (step, F1) history, so it can be replayed
    from a training report.
    """

    min_delta: float
    patience: int
    best_f1: float = -math.inf
    best_step: int = -1
    last_improvement_step: int = -1

    def update(self, step: int, f1: float) -> bool:
        """Record an evaluation; returns True when this score is a new best."""
        improved = f1 >= self.best_f1 + self.min_delta
        is_best = f1 > self.best_f1
        if improved:
            self.last_improvement_step = step
        if is_best:
            self.best_f1, self.best_step = f1, step
        return is_best

    def should_stop(self, step: int) -> bool:
        return self.last_improvement_step >= 0 and step - self.last_improvement_step >= self.patience


def replay_early_stopping(records: list[dict], min_delta: float, patience: int) -> int | None:
    """Step at which the early-stopping rule fires on a report's eval records."""
    stopper = EarlyStopping(min_delta, patience)
    for rec in records:
        stopper.update(rec["step"], rec["val_f1"])
        if stopper.should_stop(rec["step"]):
            return rec["step"]
    return None


# --- state & steps ----------------------------------------------------------

@dataclass
class TrainState:
    decoder: SelectiveSSM
    optimizer: nx.OptimizerState
    step: int = 0
    best_f1: float = -math.inf
    best_step: int = -1
    loss_history: list[float] = field(default_factory=list)


def new_train_state(encoder: SelectiveSSM, config: TrainConfig) -> TrainState:
    decoder = decoder_from_encoder(encoder)
    decoder.train()
    opt = nx.OptimizerState(list(decoder.parameters()), config.learning_rate, clip_norm=config.grad_clip)
    return TrainState(decoder, opt)


def reconstruction_loss(encoder: SelectiveSSM, decoder: SelectiveSSM, chunks) -> torch.Tensor:
    """Teacher-forced cross-entropy of ``chunk + EOS`` given the encoder's latent state."""
    chunks = torch.as_tensor(chunks, dtype=torch.long)
    bos = torch.full((chunks.shape[0], 1), BOS, dtype=torch.long)
    eos = torch.full((chunks.shape[0], 1), EOS, dtype=torch.long)
    latent = encode(encoder, torch.cat([bos, chunks], dim=1))
    cache = init_decoder(latent, decoder)
    logits, _ = lm_forward(decoder, torch.cat([bos, chunks], dim=1), cache)
    return nx.cross_entropy(logits, torch.cat([chunks, eos], dim=1))


def train_step(chunks, encoder: SelectiveSSM, state: TrainState) -> float:
    """One optimizer step on the decoder; the encoder receives no gradient."""
    length = len(chunks[0])
    if any(len(c) != length for c in chunks):
        raise ValueError("all chunks in a batch must share one length")
    state.optimizer.zero_grad()
    loss = reconstruction_loss(encoder, state.decoder, chunks)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise FloatingPointError(
            f"non-finite loss {value} at step {state.step}; last losses {state.loss_history[-5:]}"
        )
    loss.backward()
    nx.adam_step(state.optimizer)
    state.step += 1
    state.loss_history.append(value)
    return value


def reconstruct_chunks(encoder, decoder, chunks, max_tokens: int = DEFAULT_MAX_TOKENS, batch_size: int = 128):
    was_training = decoder.training
    decoder.eval()
    out = []
    for i in range(0, len(chunks), batch_size):
        batch = [encoder_view(c) for c in chunks[i:i + batch_size]]
        out.extend(reconstruct(encode(encoder, batch), decoder, max_tokens))
    decoder.train(was_training)
    return out


def validate(encoder, decoder, chunks, max_tokens: int = DEFAULT_MAX_TOKENS) -> float:
    """Mean ROUGE-1 F1 of greedy reconstructions, 0-100."""
    if not chunks:
        raise ValueError("empty validation set")
    recs = reconstruct_chunks(encoder, decoder, chunks, max_tokens)
    return float(np.mean([rouge1_f1(c, r) for c, r in zip(chunks, recs)]))


# --- full loop --------------------------------------------------------------

@dataclass
class TrainingReport:
    sequence_length: int
    records: list[dict]
    stop_step: int
    stop_reason: str
    best_step: int
    best_f1: float
    epochs: int
    encoder_checksum: str
    config: dict

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "type": "header",
            "sequence_length": self.sequence_length,
            "config": self.config,
            "improvement_reference": "best_so_far",
            "encoder_checksum": self.encoder_checksum,
        }
        footer = {
            "type": "summary",
            "stop_step": self.stop_step,
            "stop_reason": self.stop_reason,
            "best_step": self.best_step,
            "best_f1": self.best_f1,
            "epochs": self.epochs,
        }
        with open(path, "w") as fh:
            for rec in [header] + [dict(type="eval", **r) for r in self.records] + [footer]:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def read_evals(path) -> list[dict]:
        with open(path) as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        return [r for r in rows if r.get("type") == "eval"]


class ChunkSampler:
    """Shuffled passes over the training chunks; wraps around with a new epoch."""

    def __init__(self, chunks: list[list[int]], batch_size: int, seed: int):
        if not chunks:
            raise ValueError("no training chunks")
        self.chunks = chunks
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self._order = self.rng.permutation(len(chunks))
        self._pos = 0

    def next_batch(self) -> list[list[int]]:
        batch = []
        while len(batch) < self.batch_size:
            if self._pos >= len(self._order):
                self.epoch += 1
                log.info("training stream exhausted; starting epoch %d", self.epoch)
                self._order = self.rng.permutation(len(self.chunks))
                self._pos = 0
            batch.append(self.chunks[self._order[self._pos]])
            self._pos += 1
        return batch


def train_until_converged(
    config: TrainConfig,
    encoder: SelectiveSSM,
    train_tokens: Sequence[int],
    val_tokens: Sequence[int],
    checkpoint_path=None,
    validator: Callable[[SelectiveSSM, int], float] | None = None,
) -> tuple[SelectiveSSM, TrainingReport]:
    """Train one decoder for ``config.sequence_length`` until early stopping fires.

    Validation runs at step 0 and every ``eval_every`` steps.  Returns the
    decoder restored to its best-F1 weights.  ``validator(decoder, step)``
    replaces the real validation when given.
    """
    torch.manual_seed(config.seed)
    freeze(encoder)
    checksum = param_checksum(encoder)
    L = config.sequence_length
    train_chunks = chunk_stream(train_tokens, L)
    val_chunks = chunk_stream(val_tokens, L)
    if validator is None and not val_chunks:
        raise ValueError(f"validation corpus too short for length {L}")
    rng = np.random.default_rng(config.seed + 1)
    if len(val_chunks) > config.validation_size:
        idx = np.sort(rng.choice(len(val_chunks), config.validation_size, replace=False))
        val_chunks = [val_chunks[i] for i in idx]
    sampler = ChunkSampler(train_chunks, config.batch_size, config.seed)
    state = new_train_state(encoder, config)
    stopper = EarlyStopping(config.min_f1_delta, config.patience_window)
    best_weights = {k: v.clone() for k, v in state.decoder.state_dict().items()}
    records, stop_reason = [], "max_steps"
    window_losses: list[float] = []

    while True:
        if state.step % config.eval_every == 0:
            if validator is not None:
                f1 = float(validator(state.decoder, state.step))
            else:
                f1 = validate(encoder, state.decoder, val_chunks, config.max_gen_tokens)
            is_best = stopper.update(state.step, f1)
            loss = float(np.mean(window_losses)) if window_losses else None
            window_losses = []
            records.append({"step": state.step, "loss": loss, "val_f1": f1, "best_so_far": stopper.best_f1, "is_best": is_best})
            log.info("L=%d step %d loss %s val F1 %.2f%s", L, state.step, loss, f1, " *" if is_best else "")
            if is_best:
                best_weights = {k: v.clone() for k, v in state.decoder.state_dict().items()}
                state.best_f1, state.best_step = stopper.best_f1, stopper.best_step
                if checkpoint_path is not None:
                    save_model(checkpoint_path, state.decoder, {"sequence_length": L, "step": state.step, "val_f1": f1})
            if stopper.should_stop(state.step):
                stop_reason = "early_stopping"
                break
        if state.step >= config.max_steps:
            break
        window_losses.append(train_step(sampler.next_batch(), encoder, state))

    if param_checksum(encoder) != checksum:
        raise RuntimeError("encoder parameters changed during decoder training")
    state.decoder.load_state_dict(best_weights)
    state.decoder.eval()
    report = TrainingReport(
        sequence_length=L,
        records=records,
        stop_step=state.step,
        stop_reason=stop_reason,
        best_step=state.best_step,
        best_f1=state.best_f1,
        epochs=sampler.epoch,
        encoder_checksum=checksum,
        config=asdict(config),
    )
    return state.decoder, report


def pretrain_encoder(
    model: SelectiveSSM, tokens: Sequence[int], config: PretrainConfig, log_every: int = 100
) -> list[float]:
    """Next-token training on random BOS-prefixed windows of ``tokens``."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    data = np.asarray(tokens, dtype=np.int64)
    if len(data) <= config.window:
        raise ValueError("pretraining corpus shorter than one window")
    opt = nx.OptimizerState(list(model.parameters()), config.learning_rate)
    model.train()
    losses = []
    for step in range(config.steps):
        starts = rng.integers(0, len(data) - config.window, size=config.batch_size)
        win = torch.from_numpy(np.stack([data[s:s + config.window] for s in starts]))
        inp = torch.cat([torch.full((config.batch_size, 1), BOS), win[:, :-1]], dim=1)
        opt.zero_grad()
        logits, _ = lm_forward(model, inp)
        loss = nx.cross_entropy(logits, win)
        loss.backward()
        nx.adam_step(opt)
        losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.4f", step + 1, float(np.mean(losses[-log_every:])))
    model.eval()
    return losses
