"""A tiny selective state-space language model.

Each layer is the usual selective-SSM block: input projection into a value
branch and a gate branch, a depthwise causal convolution and SiLU on the value
branch, input-dependent step size / input / readout projections, the discrete
recurrence ``h_t = Abar_t * h_{t-1} + Bbar_t * z_t``, gating, and an output
projection, all wrapped in a pre-norm residual.  The output head is tied to
the embedding.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .tokenizer import BOS, VOCAB_SIZE

CHECKPOINT_MAGIC = b"ssmrecall-checkpoint 1\n"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    n_layers: int = 2
    d_model: int = 64
    d_inner: int = 128
    d_state: int = 16
    d_conv: int = 4
    dt_rank: int = 0  # 0 -> ceil(d_model / 16)
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.d_inner < self.d_model or self.d_state < 1 or self.d_conv < 1:
            raise ValueError(f"invalid model config: {self}")
        if self.dt_rank == 0:
            object.__setattr__(self, "dt_rank", math.ceil(self.d_model / 16))

    @property
    def conv_state_shape(self) -> tuple[int, int]:
        return (self.d_inner, self.d_conv)

    @property
    def ssm_state_shape(self) -> tuple[int, int]:
        return (self.d_inner, self.d_state)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class StepCache:
    """Per-layer conv window ``[B, d_inner, d_conv]`` and SSM state ``[B, d_inner, d_state]``."""

    conv: list[torch.Tensor]
    ssm: list[torch.Tensor]

    @classmethod
    def zeros(cls, config: ModelConfig, batch: int = 1, dtype=nx.TRAIN_DTYPE) -> StepCache:
        return cls(
            conv=[torch.zeros(batch, *config.conv_state_shape, dtype=dtype) for _ in range(config.n_layers)],
            ssm=[torch.zeros(batch, *config.ssm_state_shape, dtype=dtype) for _ in range(config.n_layers)],
        )

    @property
    def batch_size(self) -> int:
        return self.ssm[0].shape[0]

    def clone(self) -> StepCache:
        return StepCache([c.clone() for c in self.conv], [h.clone() for h in self.ssm])

    def detach(self) -> StepCache:
        return StepCache([c.detach() for c in self.conv], [h.detach() for h in self.ssm])

    def select(self, idx) -> StepCache:
        return StepCache([c[idx] for c in self.conv], [h[idx] for h in self.ssm])

    def equal(self, other: StepCache) -> bool:
        return all(torch.equal(a, b) for a, b in zip(self.conv + self.ssm, other.conv + other.ssm))


def discretize(delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-order hold for the transition, Euler step for the input.

    delta ``[..., T, D]``, A ``[D, N]``, B ``[..., T, N]`` ->
    ``Abar = exp(delta * A)`` and ``Bbar = delta * B``, both ``[..., T, D, N]``.
    """
    if bool((delta <= 0).any()):
        raise ValueError("step size delta must be strictly positive")
    dA = delta.unsqueeze(-1) * A
    return torch.exp(dA), delta.unsqueeze(-1) * B.unsqueeze(-2)


def selective_scan(
    z: torch.Tensor,
    Abar: torch.Tensor,
    Bbar: torch.Tensor,
    C: torch.Tensor,
    h0: torch.Tensor,
    D: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the linear recurrence over time and read it out through ``C``.

    Returns ``y [..., T, D]`` and the final state ``h_n [..., D, N]``.
    """
    T = z.shape[-2]
    if T < 1:
        raise nx.DimensionError("selective_scan needs at least one time step")
    if Abar.shape != Bbar.shape or Abar.shape[:-1] != z.shape or h0.shape != Abar.shape[:-3] + Abar.shape[-2:]:
        raise nx.DimensionError(
            f"inconsistent scan shapes z={tuple(z.shape)} Abar={tuple(Abar.shape)} h0={tuple(h0.shape)}"
        )
    if C.shape[-1] != Abar.shape[-1]:
        raise nx.DimensionError("readout C does not match state width")
    drive = (Bbar * z.unsqueeze(-1)).unbind(-3)
    h = h0
    states = []
    for a_t, d_t in zip(Abar.unbind(-3), drive):
        h = a_t * h + d_t
        states.append(h)
    hs = torch.stack(states, dim=-3)
    y = (hs * C.unsqueeze(-2)).sum(-1)
    if D is not None:
        y = y + D * z
    return y, h


class MambaBlock(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d, di, n, r = config.d_model, config.d_inner, config.d_state, config.dt_rank
        self.config = config
        self.norm = nn.Parameter(torch.ones(d))
        self.in_proj = nn.Linear(d, 2 * di, bias=False)
        self.conv_kernel = nn.Parameter(torch.empty(di, config.d_conv))
        self.conv_bias = nn.Parameter(torch.zeros(di))
        self.x_proj = nn.Linear(di, r + 2 * n, bias=False)
        self.dt_proj = nn.Linear(r, di, bias=True)
        self.A_log = nn.Parameter(torch.log(torch.arange(1, n + 1, dtype=torch.float32)).repeat(di, 1))
        self.D = nn.Parameter(torch.ones(di))
        self.out_proj = nn.Linear(di, d, bias=False)

    def reset_parameters(self, gen: torch.Generator) -> None:
        for lin in (self.in_proj, self.x_proj, self.out_proj):
            _trunc_normal(lin.weight, gen)
        bound = 1.0 / math.sqrt(self.config.d_conv)
        with torch.no_grad():
            self.conv_kernel.uniform_(-bound, bound, generator=gen)
            self.conv_bias.zero_()
            r = self.config.dt_rank
            self.dt_proj.weight.uniform_(-(r ** -0.5), r ** -0.5, generator=gen)
            # step sizes log-uniform in [1e-3, 1e-1]; bias is softplus^-1 of that
            u = torch.rand(self.config.d_inner, generator=gen)
            dt = torch.exp(u * (math.log(0.1) - math.log(1e-3)) + math.log(1e-3))
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def forward(self, u: torch.Tensor, conv_state: torch.Tensor, ssm_state: torch.Tensor):
        """u ``[B, T, d_model]`` -> (residual update, new conv window, new SSM state)."""
        cfg = self.config
        xr = self.in_proj(nx.rmsnorm(u, self.norm))
        x, res = xr.split(cfg.d_inner, dim=-1)
        xc, conv_state = nx.causal_conv1d(x.transpose(1, 2), self.conv_kernel, conv_state, self.conv_bias)
        z = nx.silu(xc.transpose(1, 2))
        dt, Bm, Cm = self.x_proj(z).split([cfg.dt_rank, cfg.d_state, cfg.d_state], dim=-1)
        delta = nx.softplus(self.dt_proj(dt))
        A = -torch.exp(self.A_log)
        Abar, Bbar = discretize(delta, A, Bm)
        y, ssm_state = selective_scan(z, Abar, Bbar, Cm, ssm_state, self.D)
        return self.out_proj(y * nx.silu(res)), conv_state, ssm_state


def _trunc_normal(w: torch.Tensor, gen: torch.Generator, std: float = 0.02) -> None:
    with torch.no_grad():
        w.normal_(0.0, std, generator=gen)
        w.clamp_(-2 * std, 2 * std)


class SelectiveSSM(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.embedding = nn.Parameter(torch.empty(config.vocab_size, config.d_model))
        self.layers = nn.ModuleList(MambaBlock(config) for _ in range(config.n_layers))
        self.norm_f = nn.Parameter(torch.ones(config.d_model))
        if not config.tie_embeddings:
            self.head = nn.Parameter(torch.empty(config.vocab_size, config.d_model))
        gen = torch.Generator().manual_seed(seed)
        _trunc_normal(self.embedding, gen)
        for layer in self.layers:
            layer.reset_parameters(gen)
        if not config.tie_embeddings:
            _trunc_normal(self.head, gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.embedding.dtype

    def forward(self, tokens: torch.Tensor, cache: StepCache | None = None) -> tuple[torch.Tensor, StepCache]:
        """tokens ``[B, T]`` -> logits ``[B, T, V]`` and the cache after the last step."""
        if tokens.dim() != 2:
            raise nx.DimensionError("tokens must be [batch, time]")
        if tokens.numel() and (int(tokens.max()) >= self.config.vocab_size or int(tokens.min()) < 0):
            raise IndexError(f"token id out of range for vocab of {self.config.vocab_size}")
        if cache is None:
            cache = StepCache.zeros(self.config, tokens.shape[0], self.dtype)
        h = self.embedding[tokens]
        conv, ssm = [], []
        for i, layer in enumerate(self.layers):
            delta, c, s = layer(h, cache.conv[i], cache.ssm[i])
            h = h + delta
            conv.append(c)
            ssm.append(s)
        h = nx.rmsnorm(h, self.norm_f)
        head = self.embedding if self.config.tie_embeddings else self.head
        return h @ head.T, StepCache(conv, ssm)


def _as_batch(tokens) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(tokens, dtype=torch.long)
    if t.dim() == 1:
        return t.unsqueeze(0), True
    return t, False


def lm_forward(model: SelectiveSSM, tokens, cache: StepCache | None = None) -> tuple[torch.Tensor, StepCache]:
    """Whole-sequence forward.  1-D token input gives ``[T, V]`` logits."""
    t, single = _as_batch(tokens)
    logits, new_cache = model(t, cache)
    return (logits[0] if single else logits), new_cache


def forward_step(model: SelectiveSSM, token, cache: StepCache) -> tuple[torch.Tensor, StepCache]:
    """Advance every layer by one token.  The input cache is left untouched."""
    tok = torch.as_tensor(token, dtype=torch.long)
    single = tok.dim() == 0
    tok = tok.reshape(-1, 1)
    logits, new_cache = model(tok, cache)
    logits = logits[:, 0]
    return (logits[0] if single else logits), new_cache


@torch.no_grad()
def perplexity(model: SelectiveSSM, tokens) -> float:
    """exp of mean NLL of ``tokens`` given a leading BOS (BOS itself not scored)."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("perplexity of an empty sequence is undefined")
    logits, _ = lm_forward(model, [BOS] + tokens[:-1])
    logp = torch.log_softmax(logits.double(), dim=-1)
    nll = -logp[torch.arange(len(tokens)), torch.tensor(tokens)].mean()
    return float(torch.exp(nll))


def greedy_generate(model: SelectiveSSM, first_tokens, cache: StepCache, max_tokens: int, stop_token: int | None):
    """Batched greedy decoding.

    Feeds ``first_tokens`` (one per batch row), then each row's own argmax.
    Rows stop at ``stop_token`` (excluded from their output) or after
    ``max_tokens`` emissions.
    """
    tok = torch.as_tensor(first_tokens, dtype=torch.long).reshape(-1)
    batch = tok.shape[0]
    outputs: list[list[int]] = [[] for _ in range(batch)]
    done = [False] * batch
    with torch.no_grad():
        for _ in range(max_tokens):
            logits, cache = forward_step(model, tok, cache)
            tok = logits.argmax(-1)
            for i, t in enumerate(tok.tolist()):
                if done[i]:
                    continue
                if stop_token is not None and t == stop_token:
                    done[i] = True
                else:
                    outputs[i].append(t)
            if all(done):
                break
    return outputs


# --- checkpoint container -------------------------------------------------

def write_container(path, kind: str, tensors: dict[str, torch.Tensor], meta: dict) -> str:
    """Write ``tensors`` as a versioned text header plus little-endian float32 payload.

    Returns the sha256 of the payload.
    """
    names = list(tensors)
    header = {
        "kind": kind,
        "dtype": "<f4",
        "meta": meta,
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    payload = b"".join(
        np.ascontiguousarray(tensors[n].detach().cpu().numpy(), dtype="<f4").tobytes() for n in names
    )
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(blob + b"\n")
        fh.write(payload)
    return hashlib.sha256(payload).hexdigest()


def read_container(path) -> tuple[str, dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        header = json.loads(fh.readline())
        payload = fh.read()
    if header["dtype"] != "<f4":
        raise ValueError(f"{path}: unsupported payload dtype {header['dtype']}")
    sizes = [int(np.prod(spec["shape"], dtype=np.int64)) for spec in header["tensors"]]
    if len(payload) != 4 * sum(sizes):
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, header declares {4 * sum(sizes)}")
    flat = np.frombuffer(payload, dtype="<f4")
    tensors, off = {}, 0
    for spec, n in zip(header["tensors"], sizes):
        tensors[spec["name"]] = torch.from_numpy(flat[off:off + n].copy()).reshape(spec["shape"])
        off += n
    return header["kind"], tensors, header["meta"]


def save_model(path, model: SelectiveSSM, meta: dict | None = None) -> str:
    meta = dict(meta or {})
    meta["config"] = model.config.to_dict()
    return write_container(path, "model", dict(model.state_dict()), meta)


def load_model(path) -> tuple[SelectiveSSM, dict]:
    kind, tensors, meta = read_container(path)
    if kind != "model":
        raise ValueError(f"{path}: expected a model checkpoint, found {kind!r}")
    model = SelectiveSSM(ModelConfig(**meta["config"]))
    model.load_state_dict(tensors)
    return model, meta


def param_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
