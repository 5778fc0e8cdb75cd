"""Coordinate-based part-segmentation field and its relaxed discrete sampling.

A single-hidden-layer ReLU MLP maps a (normalized) 3D coordinate to one
logit per candidate part. During relaxed fitting, hard part assignments are
drawn with the Gumbel-softmax trick and gradients flow through the soft
probabilities (straight-through). At projection/inference time the label is
the plain argmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class SegFieldParams:
    w1: torch.Tensor  # (hidden, 3)
    b1: torch.Tensor  # (hidden,)
    w2: torch.Tensor  # (n_max, hidden)
    b2: torch.Tensor  # (n_max,)

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_max(self) -> int:
        return self.w2.shape[0]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def detach_copy(self) -> "SegFieldParams":
        return SegFieldParams(*(t.detach().clone() for t in (self.w1, self.b1, self.w2, self.b2)))


def init_segfield(n_max: int = 20, hidden: int = 128, seed: int = 0) -> SegFieldParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization from a seed."""
    gen = torch.Generator().manual_seed(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        t = torch.empty(shape, dtype=torch.float64)
        t.uniform_(-bound, bound, generator=gen)
        return t

    return SegFieldParams(
        w1=uniform((hidden, 3), 3),
        b1=uniform((hidden,), 3),
        w2=uniform((n_max, hidden), hidden),
        b2=uniform((n_max,), hidden),
    )


def field_logits(params: SegFieldParams, x) -> torch.Tensor:
    """MLP forward: relu(x @ w1.T + b1) @ w2.T + b2; accepts (3,) or (N, 3)."""
    xt = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))
    squeeze = xt.ndim == 1
    if squeeze:
        xt = xt.unsqueeze(0)
    hidden = torch.relu(xt @ params.w1.T + params.b1)
    logits = hidden @ params.w2.T + params.b2
    return logits.squeeze(0) if squeeze else logits


@dataclass
class GumbelSample:
    hard: torch.Tensor  # exact one-hot values; gradient flows through soft
    soft: torch.Tensor
    temperature: float


def gumbel_noise(shape, generator: torch.Generator) -> torch.Tensor:
    u = torch.rand(shape, dtype=torch.float64, generator=generator)
    return -torch.log(-torch.log(u + 1e-20) + 1e-20)


def gumbel_hard_assign(
    logits: torch.Tensor,
    temperature: float,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> GumbelSample:
    """Hard one-hot sample with straight-through gradients.

    Noise can come from a seed, an existing generator, or be supplied
    directly (e.g. zeros for the noiseless limit).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        if generator is None:
            generator = torch.Generator().manual_seed(0 if seed is None else seed)
        noise = gumbel_noise(logits.shape, generator)
    soft = torch.softmax((logits + noise) / temperature, dim=-1)
    index = soft.detach().numpy().argmax(axis=-1)  # first max wins on ties
    hard_value = torch.zeros_like(soft)
    hard_value.scatter_(-1, torch.as_tensor(index).unsqueeze(-1), 1.0)
    hard = hard_value - soft.detach() + soft
    return GumbelSample(hard=hard, soft=soft, temperature=temperature)


def hard_label(params: SegFieldParams, x) -> np.ndarray:
    """Argmax part label (no sampling); ties break to the lowest index."""
    logits = field_logits(params, x).detach().numpy()
    return np.argmax(np.atleast_2d(logits), axis=-1)


def cosine_temperature(i: int, total: int, start: float = 5.0, end: float = 1.0) -> float:
    """Cosine anneal from start at i=0 to end at i=total-1."""
    if total <= 1:
        return end
    frac = min(max(i / (total - 1), 0.0), 1.0)
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))
