"""Pretraining loop and the linear-probe recognition harness."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .discriminator import Discriminator, EmaPair, bce_update, make_optimizer, make_pairs
from .model import EncoderConfig, SignRepModel, save_model, style_vector
from .objectives import (
    LossWeights,
    adversarial_loss,
    class_distribution_kl_logits,
    covariance_loss,
    label_smoothed_ce,
    recon_loss,
    total_loss,
    variance_loss,
)
from .pose_io import PoseStream, median_bone_lengths, normalize_bones
from .priors import PRIOR_NAMES, prior_targets
from .retrieval import ClassDistribution, evaluate_leave_one_out, segment_embeddings, video_representation

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "recon", "var", "cov", "adv", "total", "E_M", "E_U")


class TrainingDivergedError(ArithmeticError):
    def __init__(self, step: int, record: dict):
        super().__init__(f"non-finite loss at step {step}: {record}")
        self.step = step


@dataclass
class PretrainConfig:
    pairs: int = 8
    steps: int = 2000
    mask_ratio: float = 0.8
    warmup_frac: float = 0.1
    lr: float = 1e-4
    layer_decay: float = 0.85
    weight_decay: float = 0.5
    betas: tuple[float, float] = (0.9, 0.95)
    clip_norm: float = 1.0
    disc_lr: float = 1e-4
    disc_betas: tuple[float, float] = (0.5, 0.9)
    disc_weight_decay: float = 1e-3
    ema_momentum: float = 0.1
    eval_every: int = 250
    stride: int = 2
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.pairs < 2:
            raise ValueError("need at least two pairs per batch so unmatched partners exist")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask ratio must lie in [0, 1)")
        if self.steps < 1 or not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("steps must be >= 1 and warmup fraction in [0, 1)")

    @property
    def batch_size(self) -> int:
        return 2 * self.pairs

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.steps))


# -- data ------------------------------------------------------------------------

@dataclass
class PretrainData:
    """In-memory training clips with bone-normalised pose streams and cached prior targets."""

    videos: list[np.ndarray]
    streams: list[PoseStream]
    labels: np.ndarray
    frames: int = 16
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, videos, streams, labels, frames: int = 16) -> PretrainData:
        if not (len(videos) == len(streams) == len(labels)):
            raise ValueError("videos, streams and labels must align")
        for v, s in zip(videos, streams):
            if v.shape[0] != s.num_frames:
                raise ValueError("video and pose stream lengths differ")
            if v.shape[0] < frames + 1:
                raise ValueError(f"videos need at least {frames + 1} frames for two distinct windows")
        bones = median_bone_lengths(streams)
        normed = [normalize_bones(s, bones) for s in streams]
        return cls(list(videos), normed, np.asarray(labels), frames)

    def __len__(self) -> int:
        return len(self.videos)

    def priors(self, vid: int, start: int):
        key = (vid, start)
        if key not in self._cache:
            self._cache[key] = prior_targets(self.streams[vid].window(start, self.frames))
        return self._cache[key]

    def sample_batch(self, pairs: int, rng: np.random.Generator) -> dict:
        """``pairs`` distinct videos, two distinct windows each, mates adjacent."""
        if pairs > len(self):
            raise ValueError(f"{pairs} pairs requested from {len(self)} videos")
        vids = rng.choice(len(self), size=pairs, replace=False)
        clips, ids, starts = [], [], []
        for v in vids:
            limit = self.videos[v].shape[0] - self.frames
            a, b = rng.choice(limit + 1, size=2, replace=False)
            for s in (int(a), int(b)):
                clips.append(self.videos[v][s:s + self.frames])
                ids.append(int(v))
                starts.append(s)
        sets = [self.priors(v, s) for v, s in zip(ids, starts)]
        return {
            "clips": np.stack(clips).astype(np.float64),
            "video_ids": ids,
            "starts": starts,
            "targets": {n: np.stack([p.targets[n] for p in sets]) for n in PRIOR_NAMES},
            "masks": {n: np.stack([p.masks[n] for p in sets]) for n in PRIOR_NAMES},
            "activity": np.stack([p.activity for p in sets]),
        }


# -- training state -----------------------------------------------------------

@dataclass
class TrainState:
    model: SignRepModel
    disc: Discriminator
    opt: dc.OptimizerState
    disc_opt: dc.OptimizerState
    ema: EmaPair
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, cfg: PretrainConfig) -> TrainState:
        model = SignRepModel(cfg.encoder, seed=cfg.seed)
        disc = Discriminator(cfg.encoder.embed_dim, seed=cfg.seed + 1)
        named = list(model.named_parameters())
        opt = dc.OptimizerState.for_params(
            [p.data for _, p in named], betas=cfg.betas, weight_decay=cfg.weight_decay,
            lr_scale=model.layer_decay_scales(cfg.layer_decay),
            decay_mask=[p.ndim > 1 for _, p in named],
        )
        disc_opt = make_optimizer(disc, cfg.disc_weight_decay, cfg.disc_betas)
        return cls(model, disc, opt, disc_opt, EmaPair(momentum=cfg.ema_momentum), np.random.default_rng(cfg.seed + 2))


def _gather(x: Tensor, rows) -> Tensor:
    return dc.take(x, np.asarray(rows, dtype=np.int64), axis=0)


def pretrain_step(state: TrainState, batch: dict, cfg: PretrainConfig, lr: float) -> dict[str, float]:
    """One full update: encoder/decoder, then discriminator, then the EMA."""
    model, w = state.model, cfg.weights
    model.zero_grad()
    # (1) masked forward
    z_emb = model.embed_video(batch["clips"], cfg.mask_ratio, state.rng)
    z_avg = model.pool(z_emb)
    # (2)-(3) prior reconstruction and regularisers
    preds = model.decode(z_avg)
    recon, _ = recon_loss(preds, batch["targets"], batch["masks"], batch["activity"], w)
    var = variance_loss(z_avg)
    cov = covariance_loss(z_avg)
    # (4) adversarial style term through a frozen discriminator
    z_style = style_vector(z_emb)
    matched, unmatched = make_pairs(batch["video_ids"], state.rng)
    d_m = state.disc(_gather(z_avg, [i for i, _ in matched]), _gather(z_style, [j for _, j in matched]), frozen=True)
    d_u = state.disc(_gather(z_avg, [i for i, _ in unmatched]), _gather(z_style, [j for _, j in unmatched]), frozen=True)
    adv = adversarial_loss(d_m, d_u, state.ema.matched, state.ema.unmatched)
    total = total_loss({"recon": recon, "var": var, "cov": cov, "adv": adv}, w)
    record = {
        "step": state.step, "lr": lr, "recon": recon.item(), "var": var.item(), "cov": cov.item(),
        "adv": adv.item(), "total": total.item(),
    }
    if not all(math.isfinite(v) for v in record.values()):
        raise TrainingDivergedError(state.step, record)
    # (5) encoder/decoder update
    total.backward()
    params = model.parameters()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    grads, _ = dc.clip_grad_norm(grads, cfg.clip_norm)
    dc.adamw_step(state.opt, [p.data for p in params], grads, lr)
    # (6) discriminator on detached features
    disc_lr = cfg.disc_lr * min(1.0, (state.step + 1) / max(cfg.warmup_steps, 1))
    bce_update(state.disc, z_avg.data, z_style.data, matched, unmatched, state.disc_opt, disc_lr)
    # (7) EMA of the outputs the gate saw this step
    state.ema = state.ema.update(float(d_m.data.mean()), float(d_u.data.mean()))
    record["E_M"], record["E_U"] = state.ema.matched, state.ema.unmatched
    state.step += 1
    return record


# -- features ------------------------------------------------------------------

def extract_features(model: SignRepModel, videos, stride: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """(weighted, average) video vectors, one row per video."""
    weighted, average = [], []
    for v in videos:
        segs = segment_embeddings(model, v, stride)
        weighted.append(video_representation(segs, weighted=True))
        average.append(video_representation(segs, weighted=False))
    return np.stack(weighted), np.stack(average)


# -- loop ----------------------------------------------------------------------

def format_record(record: dict) -> str:
    return ",".join(repr(record[c]) if c != "step" else str(record[c]) for c in LOG_COLUMNS)


@dataclass
class PretrainResult:
    state: TrainState
    records: list[dict]
    best_step: int
    best_dcg: float
    best_params: dict[str, np.ndarray]
    selection: list[tuple[int, float]]


def pretrain(
    data: PretrainData,
    cfg: PretrainConfig,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> PretrainResult:
    """Run ``cfg.steps`` updates; select the checkpoint with the best leave-one-out retrieval DCG."""
    state = TrainState.create(cfg)
    batch_rng = np.random.default_rng(cfg.seed + 3)
    records: list[dict] = []
    selection: list[tuple[int, float]] = []
    best = (-1.0, -1, state.model.state_dict())
    fh = open(log_path, "w") if log_path is not None else None
    try:
        if fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
        for k in range(cfg.steps):
            lr = dc.cosine_warmup_lr(k, cfg.warmup_steps, cfg.steps, cfg.lr)
            record = pretrain_step(state, data.sample_batch(cfg.pairs, batch_rng), cfg, lr)
            records.append(record)
            if fh:
                fh.write(format_record(record) + "\n")
            done = k + 1
            if cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.steps):
                weighted, _ = extract_features(state.model, data.videos, cfg.stride)
                dcg = evaluate_leave_one_out(weighted, data.labels)["dcg"]
                selection.append((done, dcg))
                log.info("step %d recon %.4f total %.4f selection dcg %.4f", done, record["recon"], record["total"], dcg)
                if dcg > best[0]:
                    best = (dcg, done, state.model.state_dict())
    finally:
        if fh:
            fh.close()
    if best[1] < 0:
        best = (float("nan"), cfg.steps, state.model.state_dict())
    if checkpoint_path is not None:
        final = state.model.state_dict()
        state.model.load_state_dict(best[2])
        extra = {f"disc.{k}": v for k, v in state.disc.state_dict().items()}
        save_model(checkpoint_path, state.model, extra, meta={
            "best_step": best[1], "best_dcg": best[0], "pretrain": _config_dict(cfg)})
        state.model.load_state_dict(final)
    return PretrainResult(state, records, best[1], best[0], best[2], selection)


def _config_dict(cfg: PretrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    d["disc_betas"] = list(cfg.disc_betas)
    return d


# -- recognition probe -------------------------------------------------------------

def probe_loss(logits: Tensor, labels: np.ndarray, phi: ClassDistribution | None, kappa: float, smoothing: float = 0.1) -> Tensor:
    """Label-smoothed cross-entropy plus the class-distribution KL term."""
    loss = label_smoothed_ce(logits, labels, smoothing)
    if phi is not None and kappa > 0:
        loss = loss + class_distribution_kl_logits(logits, phi.phi, labels, kappa)
    return loss


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean([labels[i] in order[i] for i in range(len(labels))]))


@dataclass
class ProbeReport:
    top1: float
    top5: float
    final_loss: float


def finetune_recognition(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    phi: ClassDistribution | None,
    kappa: float,
    steps: int = 300,
    lr: float = 0.05,
    seed: int = 0,
) -> tuple[dict[str, np.ndarray], ProbeReport]:
    """Linear classifier on frozen pooled features; returns its weights and test accuracy."""
    train_y = np.asarray(train_y)
    c = int(max(train_y.max(), np.max(test_y))) + 1
    mu, sd = train_x.mean(axis=0), train_x.std(axis=0) + 1e-8
    xs = (train_x - mu) / sd
    rng = np.random.default_rng(seed)
    weight = Tensor(rng.normal(0, 0.01, size=(xs.shape[1], c)), requires_grad=True)
    bias = Tensor(np.zeros(c), requires_grad=True)
    opt = dc.OptimizerState.for_params([weight.data, bias.data], betas=(0.9, 0.999), weight_decay=1e-4,
                                       decay_mask=[True, False])
    loss = None
    for _ in range(steps):
        weight.grad = bias.grad = None
        loss = probe_loss(Tensor(xs) @ weight + bias, train_y, phi, kappa)
        loss.backward()
        dc.adamw_step(opt, [weight.data, bias.data], [weight.grad, bias.grad], lr)
    logits = ((test_x - mu) / sd) @ weight.data + bias.data
    test_y = np.asarray(test_y)
    report = ProbeReport(topk_accuracy(logits, test_y, 1), topk_accuracy(logits, test_y, 5),
                         loss.item() if loss is not None else float("nan"))
    return {"weight": weight.data.copy(), "bias": bias.data.copy(), "mean": mu, "std": sd}, report
