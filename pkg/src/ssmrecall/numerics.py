"""Dense tensor primitives used by the selective SSM.

Reverse-mode differentiation and the adaptive-moment update come from torch;
this module pins down the handful of ops the model needs, with the shape
checks and conventions the rest of the package relies on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

TRAIN_DTYPE = torch.float32
EXACT_DTYPE = torch.float64


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def causal_conv1d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    cache: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Depthwise causal convolution over ``x[..., channels, time]``.

    ``kernel[c, k]`` weights the input ``k`` steps in the past, so a kernel of
    ``[1, 0, 0, 0]`` is the identity.  ``cache`` holds the last ``width``
    inputs preceding ``x`` (zeros at stream start).  Returns the output and
    the last ``width`` columns of the concatenated stream.
    """
    channels, width = kernel.shape
    if x.shape[-2] != channels:
        raise DimensionError(f"input has {x.shape[-2]} channels, kernel has {channels}")
    lead = x.shape[:-2]
    if cache is None:
        cache = x.new_zeros(*lead, channels, width)
    elif cache.shape[-2:] != (channels, width):
        raise DimensionError(f"cache shape {tuple(cache.shape)} != ({channels}, {width})")
    stream = torch.cat([cache.expand(*lead, channels, width), x], dim=-1)
    flat = stream.reshape(-1, channels, stream.shape[-1])
    out = F.conv1d(flat, kernel.flip(-1).unsqueeze(1), bias=bias, groups=channels)
    # conv1d yields T+1 windows; the first ends on the last cached column
    out = out[..., 1:].reshape(*lead, channels, x.shape[-1])
    return out, stream[..., -width:]


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def rmsnorm(x: torch.Tensor, weight: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Scale each row of ``x`` to unit root-mean-square, then by ``weight``."""
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * weight


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean next-token negative log-likelihood over all positions."""
    vocab = logits.shape[-1]
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.numel() and (int(targets.max()) >= vocab or int(targets.min()) < 0):
        raise IndexError(f"target id out of range for vocab of {vocab}")
    return F.cross_entropy(logits.reshape(-1, vocab), targets.reshape(-1))


@dataclass
class OptimizerState:
    """Adam moments and step counter for one training loop.

    The learning rate is fixed for the lifetime of the state.
    """

    params: list[torch.nn.Parameter]
    learning_rate: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    _opt: torch.optim.Adam = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.params = [p for p in self.params if p.requires_grad]
        self._opt = torch.optim.Adam(
            self.params, lr=self.learning_rate, betas=self.betas, eps=self.eps
        )

    @property
    def step(self) -> int:
        steps = [int(s["step"]) for s in self._opt.state.values() if "step" in s]
        return max(steps, default=0)

    def moments(self, param: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor] | None:
        s = self._opt.state.get(param)
        if not s:
            return None
        return s["exp_avg"], s["exp_avg_sq"]

    def zero_grad(self) -> None:
        self._opt.zero_grad(set_to_none=False)

    def state_dict(self) -> dict:
        return self._opt.state_dict()

    def load_state_dict(self, sd: dict) -> None:
        self._opt.load_state_dict(sd)


def global_grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(sq)


def adam_step(state: OptimizerState) -> float:
    """Apply one bias-corrected Adam update from the gradients on ``state.params``.

    Gradients are clipped to ``state.clip_norm`` first.  Returns the
    pre-clipping global gradient norm.  A non-finite gradient aborts the step
    before any parameter is touched.
    """
    for p in state.params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    norm = global_grad_norm(state.params)
    if not math.isfinite(norm):
        bad = [i for i, p in enumerate(state.params) if not torch.isfinite(p.grad).all()]
        raise FloatingPointError(f"non-finite gradient in parameters {bad}; step aborted")
    if state.clip_norm is not None and norm > state.clip_norm:
        scale = state.clip_norm / (norm + 1e-6)
        for p in state.params:
            p.grad.mul_(scale)
    state._opt.step()
    return norm
