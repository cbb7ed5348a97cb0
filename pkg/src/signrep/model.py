"""Masked video encoder, sign decoder, style vector and checkpoint format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .layers import MLP, LayerNorm, Linear, Module
from .priors import PRIOR_NAMES, prior_size


@dataclass(frozen=True)
class EncoderConfig:
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 3
    patch_t: int = 2
    patch_s: int = 8
    embed_dim: int = 64
    blocks: int = 2
    heads: int = 4
    mask_ratio: float = 0.8
    mlp_ratio: int = 4
    upsample_hidden: int = 64
    decoder_dim: int = 32

    def __post_init__(self):
        if self.height % self.patch_s or self.width % self.patch_s:
            raise ValueError(f"frame {self.height}x{self.width} not divisible by spatial patch {self.patch_s}")
        if self.frames % self.patch_t:
            raise ValueError(f"{self.frames} frames not divisible by temporal patch {self.patch_t}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask ratio must lie in [0, 1)")

    @property
    def num_tokens(self) -> int:
        return (self.frames // self.patch_t) * (self.height // self.patch_s) * (self.width // self.patch_s)

    @property
    def patch_dim(self) -> int:
        return self.patch_t * self.patch_s * self.patch_s * self.channels

    @property
    def num_visible(self) -> int:
        return self.num_tokens - round(self.mask_ratio * self.num_tokens)

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# tokens and masking
# ---------------------------------------------------------------------------

def patchify_raw(video: np.ndarray, patch_t: int, patch_s: int) -> np.ndarray:
    """(..., T, H, W, C) -> (..., N, t*s*s*C); tokens ordered time-major, then rows, then columns."""
    *lead, t, h, w, c = video.shape
    if t % patch_t or h % patch_s or w % patch_s:
        raise ValueError(f"video {t}x{h}x{w} not divisible by patch ({patch_t}, {patch_s}, {patch_s})")
    nt, nh, nw = t // patch_t, h // patch_s, w // patch_s
    x = video.reshape(*lead, nt, patch_t, nh, patch_s, nw, patch_s, c)
    k = len(lead)
    x = np.transpose(x, list(range(k)) + [k + 0, k + 2, k + 4, k + 1, k + 3, k + 5, k + 6])
    return x.reshape(*lead, nt * nh * nw, patch_t * patch_s * patch_s * c)


def standardize_clips(videos: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Zero mean, unit variance per clip and colour channel over (T, H, W).

    Removes the per-video background tint before the encoder sees it.
    """
    v = np.asarray(videos, dtype=np.float64)
    if v.ndim < 4:
        raise ValueError(f"expected (..., T, H, W, C), got {v.shape}")
    axes = (-4, -3, -2)
    return (v - v.mean(axis=axes, keepdims=True)) / (v.std(axis=axes, keepdims=True) + eps)


def mask_indices(num_tokens: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of the tokens that stay visible."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("mask ratio must lie in [0, 1)")
    n_drop = round(ratio * num_tokens)
    dropped = rng.choice(num_tokens, size=n_drop, replace=False)
    keep = np.ones(num_tokens, dtype=bool)
    keep[dropped] = False
    return np.flatnonzero(keep)


def random_mask(tokens: Tensor, ratio: float, seed: int) -> tuple[Tensor, np.ndarray]:
    """Drop ``round(ratio * N)`` tokens chosen uniformly without replacement.

    Returns the visible tokens in their original order and a boolean mask
    that is True for dropped positions.
    """
    n = tokens.shape[-2]
    keep = mask_indices(n, ratio, np.random.default_rng(seed))
    dropped = np.ones(n, dtype=bool)
    dropped[keep] = False
    return dc.take(tokens, keep, axis=tokens.ndim - 2), dropped


def sincos_positions(grid: tuple[int, ...], dim: int) -> np.ndarray:
    """Separable sin/cos table over a (t, h, w) token grid -> (prod(grid), dim).

    The width is split evenly between the axes; leftover columns stay zero.
    """
    per_axis = (dim // len(grid)) // 2 * 2
    if per_axis < 2:
        raise ValueError(f"embed dim {dim} too small for a {len(grid)}-axis table")
    coords = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in grid], indexing="ij"), -1).reshape(-1, len(grid))
    freqs = 1.0 / 10000.0 ** (np.arange(per_axis // 2) / (per_axis // 2))
    out = np.zeros((coords.shape[0], dim))
    for a in range(len(grid)):
        ang = coords[:, a:a + 1] * freqs[None]
        out[:, a * per_axis:(a + 1) * per_axis] = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return out


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng, init_std=0.5 / math.sqrt(dim))
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, init_std=0.5 / math.sqrt(dim * mlp_ratio))

    def attention(self, x: Tensor) -> Tensor:
        b, k, d = x.shape
        h = self.heads
        dh = d // h

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, k, h, dh).transpose(0, 2, 1, 3)

        q, kk, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = dc.scale(q @ kk.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
        attn = dc.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, k, d)
        return self.proj(out)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.fc2(dc.gelu(self.fc1(self.norm2(x))))


HEAD_INIT_STD = 0.01


class SignDecoder(Module):
    """Pooling path to z_avg, temporal upsampler, one linear head per prior, activity MLP."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d, hid, dout, t = cfg.embed_dim, cfg.upsample_hidden, cfg.decoder_dim, cfg.frames
        self.frames = t
        self.pool_norm = LayerNorm(d)
        self.pool_fc = Linear(d, d, rng)
        self.up_conv_w = Tensor(rng.normal(0, 1 / math.sqrt(d), size=(hid, d, 1)), requires_grad=True)
        self.up_conv_b = Tensor(np.zeros(hid), requires_grad=True)
        self.up_tconv_w = Tensor(rng.normal(0, 1 / math.sqrt(hid), size=(hid, dout, t)), requires_grad=True)
        self.up_tconv_b = Tensor(np.zeros(dout), requires_grad=True)
        # small output heads: a large random initial prediction teaches the encoder to ignore its input
        self.heads = {name: Linear(dout, prior_size(name), rng, init_std=HEAD_INIT_STD) for name in PRIOR_NAMES}
        self.activity = MLP([d, d, 2], rng)

    def pool(self, z_emb: Tensor) -> Tensor:
        return self.pool_fc(self.pool_norm(dc.mean(z_emb, axis=-2)))

    def upsample(self, z_avg: Tensor, frames: int | None = None) -> Tensor:
        """(B, D) -> (B, T, D')."""
        if frames is not None and frames != self.frames:
            raise ValueError(f"decoder built for {self.frames} frames, asked for {frames}")
        b = z_avg.shape[0]
        x = z_avg.reshape(b, -1, 1)
        x = dc.gelu(dc.conv1d(x, self.up_conv_w, self.up_conv_b))
        x = dc.conv_transpose1d(x, self.up_tconv_w, self.up_tconv_b)
        return x.transpose(0, 2, 1)

    def __call__(self, z_avg: Tensor, frames: int | None = None) -> dict[str, Tensor]:
        z_up = self.upsample(z_avg, frames)
        out = {name: head(z_up) for name, head in self.heads.items()}
        out["activity"] = self.activity(z_avg)
        return out


class SignRepModel(Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = Linear(cfg.patch_dim, d, rng)
        grid = (cfg.frames // cfg.patch_t, cfg.height // cfg.patch_s, cfg.width // cfg.patch_s)
        self.pos = Tensor(sincos_positions(grid, d), requires_grad=True)
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.blocks)]
        self.decoder = SignDecoder(cfg, rng)

    # -- encoder path -------------------------------------------------------
    def tokens(self, patches: np.ndarray, keep: np.ndarray | None = None) -> Tensor:
        """Embed raw patches (B, N, P) [or visible subset with indices ``keep`` (B, K)] and add positions."""
        if keep is None:
            keep = np.broadcast_to(np.arange(patches.shape[-2]), patches.shape[:-1])
            x = patches
        else:
            x = np.take_along_axis(patches, keep[..., None], axis=-2)
        return self.embed(Tensor(x)) + dc.take(self.pos, keep, axis=0)

    def encode(self, tokens: Tensor) -> Tensor:
        squeeze = tokens.ndim == 2
        x = tokens.reshape(1, *tokens.shape) if squeeze else tokens
        if x.shape[-2] < 1:
            raise ValueError("encoder needs at least one visible token")
        for block in self.blocks:
            x = block(x)
        return x.reshape(*x.shape[1:]) if squeeze else x

    def embed_video(self, videos: np.ndarray, mask_ratio: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        """(B, T, H, W, C) -> z_emb (B, K, D), optionally masking each clip independently."""
        patches = patchify_raw(standardize_clips(videos), self.cfg.patch_t, self.cfg.patch_s)
        keep = None
        if mask_ratio > 0:
            rng = rng if rng is not None else np.random.default_rng()
            keep = np.stack([mask_indices(patches.shape[1], mask_ratio, rng) for _ in range(patches.shape[0])])
        return self.encode(self.tokens(patches, keep))

    def pool(self, z_emb: Tensor) -> Tensor:
        return self.decoder.pool(z_emb)

    def decode(self, z_avg: Tensor, frames: int | None = None) -> dict[str, Tensor]:
        return self.decoder(z_avg, frames)

    # -- parameter groups ----------------------------------------------------
    def layer_id(self, name: str) -> int:
        """0 for embeddings, i + 1 for block i, blocks + 1 for the decoder."""
        if name.startswith(("embed.", "pos")):
            return 0
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1
        return self.cfg.blocks + 1

    def layer_decay_scales(self, decay: float) -> list[float]:
        top = self.cfg.blocks + 1
        return [decay ** (top - self.layer_id(n)) for n, _ in self.named_parameters()]


def patchify(model: SignRepModel, video: np.ndarray) -> Tensor:
    """Embedded tokens with positional encodings for one (T, H, W, C) video -> (N, D)."""
    patches = patchify_raw(standardize_clips(np.asarray(video, dtype=np.float64)[None]), model.cfg.patch_t, model.cfg.patch_s)
    return model.tokens(patches).reshape(model.cfg.num_tokens, model.cfg.embed_dim)


def style_vector(z_emb: Tensor) -> Tensor:
    """Column mean of the token Gram matrix ``Z^T Z / K`` -> (..., D)."""
    k = z_emb.shape[-2]
    axes = tuple(range(z_emb.ndim - 2)) + (z_emb.ndim - 1, z_emb.ndim - 2)
    gram = dc.scale(z_emb.transpose(axes) @ z_emb, 1.0 / k)
    return dc.mean(gram, axis=-2)


def inflate_patch_kernel(old: np.ndarray) -> np.ndarray:
    """(C_out, C_in, 3, kh, kw) -> (C_out, C_in, 7, kh, kw); old slices 0,1,2 land on 1,3,5."""
    old = np.asarray(old)
    if old.ndim != 5 or old.shape[2] != 3:
        raise ValueError(f"expected kernel of shape (C_out, C_in, 3, kh, kw), got {old.shape}")
    new = np.zeros(old.shape[:2] + (7,) + old.shape[3:], dtype=old.dtype)
    new[:, :, [1, 3, 5]] = old
    return new


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SRCK0001"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    cfg = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    pos = 8

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (cfg_len,) = read("<I")
    config = json.loads(raw[pos:pos + cfg_len].decode())
    pos += cfg_len
    (count,) = read("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<I")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = read("<I")
        shape = read(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(raw):
            raise CheckpointError(f"{path}: tensor {name!r} truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return config, tensors


def save_model(path: str | Path, model: SignRepModel, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra or {})
    save_checkpoint(path, {"encoder": asdict(model.cfg), **(meta or {})}, tensors)


def load_model(path: str | Path, expect: EncoderConfig | None = None) -> tuple[SignRepModel, dict, dict[str, np.ndarray]]:
    config, tensors = load_checkpoint(path)
    cfg = EncoderConfig.from_dict(config["encoder"])
    if expect is not None and cfg != expect:
        raise CheckpointError(f"checkpoint config {cfg} does not match requested {expect}")
    model = SignRepModel(cfg)
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    rest = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, config, rest
