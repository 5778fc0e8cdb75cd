"""Adam updates over named parameter groups and finite-difference auditing.

The fitting stages keep parameters as a dict of named float64 torch
tensors with a learning rate per group; gradients come from reverse-mode
accumulation through the energy graph. ``grad_check`` compares any
objective's analytic gradient against central differences on sampled
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import NonFiniteGradient

ParamSet = dict[str, torch.Tensor]
GradSet = dict[str, torch.Tensor]
Objective = Callable[[ParamSet], tuple[float, GradSet]]


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: ParamSet,
    grads: GradSet,
    lr: float | dict[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One in-place Adam update with bias correction.

    ``lr`` is a single rate or a per-group dict. Missing gradients leave a
    group untouched.
    """
    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise NonFiniteGradient(f"gradient for '{name}' is not finite")
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for '{name}'")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            rate = lr[name] if isinstance(lr, dict) else lr
            p.add_(-rate * m_hat / (v_hat.sqrt() + eps))
    return state


def collect_grads(params: ParamSet) -> GradSet:
    """Pull .grad off each parameter (zeros where autograd left None)."""
    out = {}
    for name, p in params.items():
        out[name] = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
    return out


def zero_grads(params: ParamSet) -> None:
    for p in params.values():
        if p.grad is not None:
            p.grad = None


def grad_check(
    objective: Objective,
    params: ParamSet,
    samples: int = 20,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error of the analytic gradient vs central differences.

    Samples coordinates uniformly across all groups. Relative error is
    |analytic - fd| / max(|analytic|, |fd|, 1e-10).
    """
    _, grads = objective(params)
    coords = []
    for name, p in params.items():
        coords += [(name, i) for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(coords), size=min(samples, len(coords)), replace=False)
    worst = 0.0
    for pick in picks:
        name, i = coords[pick]
        flat = params[name].detach().view(-1)
        orig = float(flat[i])
        flat[i] = orig + h
        fp, _ = objective(params)
        flat[i] = orig - h
        fm, _ = objective(params)
        flat[i] = orig
        fd = (fp - fm) / (2 * h)
        analytic = float(grads[name].view(-1)[i])
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-10)
        worst = max(worst, err)
    return worst
