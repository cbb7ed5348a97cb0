"""Style-match discriminator with spectrally normalised head, pairing and EMA of its outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .layers import LayerNorm, Linear, Module, const

STYLE_SCALE = 100.0
# five iterations leave 26% of random 16x16 matrices outside +-5%; fifty leave none of 200
SN_ITERATIONS = 50


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def power_iteration(w: np.ndarray, u: np.ndarray, n_iter: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Top singular triplet estimate of ``w`` (rows x cols) starting from left vector ``u``."""
    v = _unit(w.T @ u)
    for _ in range(n_iter):
        v = _unit(w.T @ u)
        u = _unit(w @ v)
    return u, v, float(u @ w @ v)


def spectral_normalize(weight: np.ndarray, n_iter: int = SN_ITERATIONS, u: np.ndarray | None = None, seed: int = 0) -> np.ndarray:
    """``W / sigma_max(W)`` with sigma_max from ``n_iter`` power iterations."""
    w = np.asarray(weight, dtype=np.float64)
    if not np.any(w):
        raise ValueError("cannot spectrally normalise a zero matrix")
    if u is None:
        u = _unit(np.random.default_rng(seed).normal(size=w.shape[0]))
    _, _, sigma = power_iteration(w, u, max(n_iter, 1))
    return w / sigma


class SNLinear(Module):
    """Linear layer whose weight is divided by its power-iteration spectral norm.

    The singular vectors persist across calls and advance one iteration per
    call with ``update=True``; gradients flow through sigma with the vectors
    held fixed.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.inner = Linear(n_in, n_out, rng)
        self.u = _unit(rng.normal(size=n_in))
        self.v = _unit(rng.normal(size=n_out))
        # warm the vectors so the very first forward already divides by ~sigma_max
        self.sigma(update=True, n_iter=SN_ITERATIONS)

    def sigma(self, update: bool, n_iter: int = 1) -> float:
        w = self.inner.weight.data
        if update:
            # weight is stored (in, out); iterate on it directly
            self.u, self.v, _ = power_iteration(w, self.u, n_iter)
        return float(self.u @ w @ self.v)

    def __call__(self, x: Tensor, frozen: bool = False, update: bool = False) -> Tensor:
        self.sigma(update)
        w = const(self.inner.weight, frozen)
        sigma = dc.tsum(w * np.outer(self.u, self.v))
        y = dc.matmul(x, dc.div(w, sigma))
        return y + const(self.inner.bias, frozen)


class Discriminator(Module):
    def __init__(self, dim: int, hidden: int | None = None, seed: int = 0):
        rng = np.random.default_rng(seed)
        hidden = hidden or dim
        self.dim = dim
        self.proj1 = Linear(dim, hidden, rng)
        self.proj2 = Linear(hidden, dim, rng)
        self.proj_norm = LayerNorm(dim)
        self.head = [SNLinear(2 * dim, hidden, rng), SNLinear(hidden, hidden, rng),
                     SNLinear(hidden, hidden, rng), SNLinear(hidden, 1, rng)]

    @staticmethod
    def scaled_style(z_style: Tensor) -> Tensor:
        return dc.scale(dc.as_tensor(z_style), STYLE_SCALE)

    def project_style(self, z_style: Tensor, frozen: bool = False) -> Tensor:
        x = dc.gelu(self.proj1(self.scaled_style(z_style), frozen))
        x = dc.gelu(self.proj2(x, frozen))
        return self.proj_norm(x, frozen)

    def logits(self, z_avg, z_style, frozen: bool = False, update_sn: bool = False) -> Tensor:
        x = dc.concat([dc.as_tensor(z_avg), self.project_style(z_style, frozen)], axis=-1)
        for i, layer in enumerate(self.head):
            x = layer(x, frozen, update_sn)
            if i < len(self.head) - 1:
                x = dc.gelu(x)
        return x.reshape(*x.shape[:-1])

    def __call__(self, z_avg, z_style, frozen: bool = False, update_sn: bool = False) -> Tensor:
        return dc.sigmoid(self.logits(z_avg, z_style, frozen, update_sn))


def discriminate(disc: Discriminator, z_avg, z_style) -> Tensor:
    """Match probability in (0, 1) for each (z_avg, z_style) row."""
    return disc(z_avg, z_style)


def make_pairs(video_ids, seed: int | np.random.Generator) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Matched (item, same-video mate) and unmatched (item, random other-video item) index pairs."""
    ids = list(video_ids)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    matched, unmatched = [], []
    for i, vid in enumerate(ids):
        mates = [j for j, other in enumerate(ids) if other == vid and j != i]
        if len(mates) != 1:
            raise ValueError(f"item {i} (video {vid!r}) has {len(mates)} batch mates, expected exactly 1")
        matched.append((i, mates[0]))
        strangers = [j for j, other in enumerate(ids) if other != vid]
        if not strangers:
            raise ValueError("batch holds a single video; no unmatched partner available")
        unmatched.append((i, int(strangers[rng.integers(len(strangers))])))
    return matched, unmatched


def bce_from_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, via a two-class log-softmax for stability."""
    two = dc.concat([dc.scale(logits, 0.0).reshape(-1, 1), logits.reshape(-1, 1)], axis=1)
    logp = dc.log_softmax(two, axis=1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    pick = np.stack([1.0 - labels, labels], axis=1)
    return dc.scale(dc.tsum(logp * pick), -1.0 / len(labels))


def pair_inputs(z_avg: np.ndarray, z_style: np.ndarray, matched, unmatched) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pairs = list(matched) + list(unmatched)
    a = np.array([z_avg[i] for i, _ in pairs])
    s = np.array([z_style[j] for _, j in pairs])
    labels = np.array([1.0] * len(matched) + [0.0] * len(unmatched))
    return a, s, labels


def bce_update(
    disc: Discriminator,
    z_avg: np.ndarray,
    z_style: np.ndarray,
    matched,
    unmatched,
    optimizer: dc.OptimizerState,
    lr: float,
) -> float:
    """One BCE step on the discriminator. Encoder outputs enter as plain arrays, so nothing upstream moves."""
    a, s, labels = pair_inputs(np.asarray(z_avg), np.asarray(z_style), matched, unmatched)
    disc.zero_grad()
    loss = bce_from_logits(disc.logits(Tensor(a), Tensor(s), update_sn=True), labels)
    loss.backward()
    params = disc.parameters()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    dc.adamw_step(optimizer, [p.data for p in params], grads, lr)
    return loss.item()


def make_optimizer(disc: Discriminator, weight_decay: float = 1e-3, betas=(0.5, 0.9)) -> dc.OptimizerState:
    named = list(disc.named_parameters())
    return dc.OptimizerState.for_params(
        [p.data for _, p in named], betas=betas, weight_decay=weight_decay,
        decay_mask=[p.ndim > 1 for _, p in named],
    )


@dataclass
class EmaPair:
    matched: float = 0.5
    unmatched: float = 0.5
    momentum: float = 0.1

    def update(self, matched_mean: float, unmatched_mean: float) -> EmaPair:
        return ema_update(self, matched_mean, unmatched_mean)

    @property
    def gate_open(self) -> bool:
        return self.matched > self.unmatched


def ema_update(state: EmaPair, matched_mean: float, unmatched_mean: float) -> EmaPair:
    m = state.momentum
    return EmaPair(
        matched=(1.0 - m) * state.matched + m * float(matched_mean),
        unmatched=(1.0 - m) * state.unmatched + m * float(unmatched_mean),
        momentum=m,
    )
