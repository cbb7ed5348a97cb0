"""Training losses: prior reconstruction, variance/covariance regularisers, adversarial style loss, class-distribution KL."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .priors import DEFAULT_SCALES, PRIOR_NAMES

DEFAULT_PRIOR_WEIGHTS: dict[str, float] = {
    "lh_ang": 10.0, "rh_ang": 10.0, "body_ang": 10.0,
    "lh_kpt": 10.0, "rh_kpt": 10.0, "body_kpt": 10.0,
    "lh_dist": 20.0, "rh_dist": 20.0, "body_dist": 20.0,
    "activity": 0.2,
}


@dataclass
class LossWeights:
    prior: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PRIOR_WEIGHTS))
    scales: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SCALES))
    var: float = 1.0
    cov: float = 0.004
    adv: float = 2.0
    kappa: float = 0.2

    def __post_init__(self):
        values = list(self.prior.values()) + list(self.scales.values()) + [self.var, self.cov, self.adv, self.kappa]
        if any(v < 0 for v in values):
            raise ValueError("loss weights must be non-negative")


def smooth_l1_masked(pred: Tensor, target, mask=None, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 over the entries where ``mask`` is True (all when None); 0 if none are."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    per = dc.smooth_l1(pred - target, beta)
    if mask is None:
        return dc.mean(per)
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        return dc.scale(dc.tsum(per), 0.0)
    return dc.scale(dc.tsum(per * mask), 1.0 / count)


def recon_loss(
    preds: dict[str, Tensor],
    targets: dict[str, np.ndarray],
    masks: dict[str, np.ndarray],
    activity: np.ndarray,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum over priors of the masked smooth-L1 loss.

    ``preds[name]`` is (B, T, flat) from the decoder heads; targets and masks
    are (B, T, *prior_shape). ``preds["activity"]`` holds logits; they pass
    through a sigmoid before being compared with the 0/1 activity bits.
    """
    total = None
    parts: dict[str, float] = {}
    for name in PRIOR_NAMES:
        w = weights.prior.get(name, 0.0)
        pred = preds[name]
        tgt = np.asarray(targets[name]).reshape(pred.shape)
        msk = np.asarray(masks[name]).reshape(pred.shape) if masks is not None else None
        term = smooth_l1_masked(pred, tgt, msk)
        parts[name] = term.item()
        total = dc.scale(term, w) if total is None else total + dc.scale(term, w)
    act = smooth_l1_masked(dc.sigmoid(preds["activity"]), np.asarray(activity, dtype=np.float64))
    parts["activity"] = act.item()
    total = total + dc.scale(act, weights.prior.get("activity", 0.0))
    return total, parts


def _require_batch(z: Tensor) -> None:
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"need a (N, D) batch with N >= 2, got shape {z.shape}")


def variance_loss(z: Tensor) -> Tensor:
    """Sum over dimensions of ``max(0, 1 - std_j)``, std with the N - 1 denominator."""
    _require_batch(z)
    n = z.shape[0]
    zc = z - dc.mean(z, axis=0, keepdims=True)
    std = dc.sqrt(dc.scale(dc.tsum(dc.square(zc), axis=0), 1.0 / (n - 1)))
    return dc.tsum(dc.maximum(dc.scale(std, -1.0) + 1.0, 0.0))


def covariance_loss(z: Tensor) -> Tensor:
    """Sum of squared off-diagonal entries of the (1/N) covariance matrix."""
    _require_batch(z)
    n, d = z.shape
    zc = z - dc.mean(z, axis=0, keepdims=True)
    cov = dc.scale(zc.T @ zc, 1.0 / n)
    off = 1.0 - np.eye(d)
    return dc.tsum(dc.square(cov) * off)


def adversarial_loss(d_matched, d_unmatched, e_matched: float, e_unmatched: float) -> Tensor:
    """Style-fooling loss, averaged over pairs; identically 0 unless E_M > E_U."""
    d_matched = dc.as_tensor(d_matched)
    d_unmatched = dc.as_tensor(d_unmatched)
    if not e_matched > e_unmatched:
        return dc.scale(dc.tsum(d_matched) + dc.tsum(d_unmatched), 0.0)
    pos = dc.maximum(d_matched - float(e_unmatched), 0.0)
    neg = dc.maximum(dc.scale(d_unmatched, -1.0) + float(e_matched), 0.0)
    return dc.mean(dc.square(pos) + dc.square(neg))


def total_loss(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    return (
        dc.as_tensor(components["recon"])
        + dc.scale(dc.as_tensor(components["var"]), weights.var)
        + dc.scale(dc.as_tensor(components["cov"]), weights.cov)
        + dc.scale(dc.as_tensor(components["adv"]), weights.adv)
    )


def class_distribution_kl(predicted, phi_row, c: int, kappa: float) -> Tensor:
    """``kappa * phi[c] * KL(phi || predicted)`` in nats for one sample.

    Entries with ``phi == 0`` contribute nothing; a zero predicted probability
    where ``phi > 0`` is an error.
    """
    predicted = dc.as_tensor(predicted)
    phi = np.asarray(phi_row, dtype=np.float64)
    for name, arr in (("predicted", predicted.data), ("phi", phi)):
        if abs(arr.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} does not sum to 1 (sum={arr.sum():.12g})")
    support = phi > 0
    if np.any(predicted.data[support] <= 0):
        raise ValueError("predicted probability is zero on a class phi supports; smooth it first")
    idx = np.flatnonzero(support)
    p_sel = dc.take(predicted, idx, axis=0)
    kl = dc.tsum((np.log(phi[idx]) - dc.log(p_sel)) * phi[idx])
    return dc.scale(kl, kappa * phi[c])


def class_distribution_kl_logits(logits: Tensor, phi: np.ndarray, labels: np.ndarray, kappa: float) -> Tensor:
    """Batch mean of :func:`class_distribution_kl` with predictions ``softmax(logits)``."""
    labels = np.asarray(labels)
    rows = np.asarray(phi, dtype=np.float64)[labels]
    logp = dc.log_softmax(logits, axis=-1)
    safe = np.where(rows > 0, rows, 1.0)
    neg_entropy = float((rows * np.log(safe)).sum(axis=-1) @ rows[np.arange(len(labels)), labels])
    weight = rows[np.arange(len(labels)), labels][:, None]
    cross = dc.tsum(logp * (rows * weight))
    return dc.scale(dc.scale(cross, -1.0) + neg_entropy, kappa / len(labels))


def label_smoothed_ce(logits: Tensor, labels: np.ndarray, smoothing: float = 0.1) -> Tensor:
    n, c = logits.shape
    target = np.full((n, c), smoothing / c)
    target[np.arange(n), np.asarray(labels)] += 1.0 - smoothing
    return dc.scale(dc.tsum(dc.log_softmax(logits, axis=-1) * target), -1.0 / n)
