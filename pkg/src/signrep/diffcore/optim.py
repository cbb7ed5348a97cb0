"""AdamW with decoupled weight decay, global-norm clipping, warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.5
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    # per-parameter multipliers: layer-wise lr decay and decay on/off
    lr_scale: list[float] = field(default_factory=list)
    decay_mask: list[bool] = field(default_factory=list)

    @classmethod
    def for_params(
        cls,
        params: Sequence[np.ndarray],
        betas: tuple[float, float] = (0.9, 0.95),
        weight_decay: float = 0.5,
        eps: float = 1e-8,
        lr_scale: Sequence[float] | None = None,
        decay_mask: Sequence[bool] | None = None,
    ) -> OptimizerState:
        return cls(
            betas=tuple(betas),
            weight_decay=weight_decay,
            eps=eps,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr_scale=list(lr_scale) if lr_scale is not None else [1.0] * len(params),
            decay_mask=list(decay_mask) if decay_mask is not None else [True] * len(params),
        )


def adamw_step(
    state: OptimizerState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float,
) -> tuple[Sequence[np.ndarray], OptimizerState]:
    """One bias-corrected AdamW update, applied in place to ``params``.

    Decay is decoupled: ``p -= lr * wd * p`` happens before the Adam step and
    does not pass through the moment estimates.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError(f"shape mismatch at parameter {i}: {p.shape} vs grad {g.shape}")
        step_lr = lr * state.lr_scale[i]
        if state.decay_mask[i] and state.weight_decay:
            p *= 1.0 - step_lr * state.weight_decay
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``. Returns (grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return [g * factor for g in grads], norm
    return list(grads), norm


def cosine_warmup_lr(step: int, warmup_steps: int, total_steps: int, lr_max: float) -> float:
    """Linear warmup from 0 to ``lr_max`` then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    if step <= warmup_steps:
        return lr_max * step / warmup_steps if warmup_steps > 0 else lr_max
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))
