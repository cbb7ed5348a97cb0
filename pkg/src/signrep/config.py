"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import EncoderConfig
from .objectives import DEFAULT_PRIOR_WEIGHTS, LossWeights
from .priors import DEFAULT_SCALES
from .trainer import PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # dataset
    seed: int = 0
    classes: int = 10
    samples_per_class: int = 20
    length: int = 32
    height: int = 32
    width: int = 32
    # encoder
    patch_t: int = 2
    patch_s: int = 8
    embed_dim: int = 64
    blocks: int = 2
    heads: int = 4
    # pretraining
    pairs: int = 8
    steps: int = 2000
    mask_ratio: float = 0.8
    warmup_frac: float = 0.1
    lr: float = 1e-4
    layer_decay: float = 0.85
    weight_decay: float = 0.5
    clip_norm: float = 1.0
    disc_lr: float = 1e-4
    ema_momentum: float = 0.1
    eval_every: int = 250
    # loss weights
    w_var: float = 1.0
    w_cov: float = 0.004
    w_adv: float = 2.0
    kappa: float = 0.2
    # retrieval and class distribution
    stride: int = 2
    weighted: bool = True
    top_k: int = 5
    tau_min: float = 0.001
    tau_max: float = 0.1
    tau_step: float = 0.001
    # recognition probe
    probe_steps: int = 300
    probe_lr: float = 0.05

    def __post_init__(self):
        for name in DEFAULT_PRIOR_WEIGHTS:
            if not hasattr(self, f"w_{name}"):
                setattr(self, f"w_{name}", DEFAULT_PRIOR_WEIGHTS[name])
        for name in DEFAULT_SCALES:
            if not hasattr(self, f"psi_{name}"):
                setattr(self, f"psi_{name}", DEFAULT_SCALES[name])
        if not 0 < self.tau_min <= self.tau_max:
            raise ConfigError("need 0 < tau_min <= tau_max")
        if self.tau_step <= 0:
            raise ConfigError("tau_step must be positive")
        if self.stride < 1 or self.top_k < 1:
            raise ConfigError("stride and top_k must be positive")

    # -- key table --------------------------------------------------------------

    @classmethod
    def defaults(cls) -> dict[str, object]:
        d = {f.name: f.default for f in fields(cls)}
        d.update({f"w_{n}": w for n, w in DEFAULT_PRIOR_WEIGHTS.items()})
        d.update({f"psi_{n}": DEFAULT_SCALES[n] for n in DEFAULT_SCALES})
        return d

    def to_dict(self) -> dict[str, object]:
        return {k: getattr(self, k) for k in self.defaults()}

    def replace(self, **overrides) -> RunConfig:
        return RunConfig.from_dict(self.to_dict() | overrides)

    @classmethod
    def from_dict(cls, values: dict[str, object]) -> RunConfig:
        table = cls.defaults()
        unknown = sorted(set(values) - set(table))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        typed = {k: _coerce(k, v, type(table[k])) for k, v in values.items()}
        own = {f.name for f in fields(cls)}
        cfg = cls(**{k: v for k, v in typed.items() if k in own})
        for k, v in typed.items():
            if k not in own:
                setattr(cfg, k, v)
        return cfg

    # -- text form ----------------------------------------------------------------

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> RunConfig:
        values: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
            key = key.strip()
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = value.strip()
        try:
            return cls.from_dict(values)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.parse(path.read_text(), str(path))

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    # -- views for the library ----------------------------------------------------

    def tau_grid(self) -> np.ndarray:
        n = int(round((self.tau_max - self.tau_min) / self.tau_step)) + 1
        return np.round(self.tau_min + np.arange(n) * self.tau_step, 12)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(height=self.height, width=self.width, patch_t=self.patch_t, patch_s=self.patch_s,
                             embed_dim=self.embed_dim, blocks=self.blocks, heads=self.heads,
                             mask_ratio=self.mask_ratio)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            prior={n: getattr(self, f"w_{n}") for n in DEFAULT_PRIOR_WEIGHTS},
            scales={n: getattr(self, f"psi_{n}") for n in DEFAULT_SCALES},
            var=self.w_var, cov=self.w_cov, adv=self.w_adv, kappa=self.kappa,
        )

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(
            pairs=self.pairs, steps=self.steps, mask_ratio=self.mask_ratio, warmup_frac=self.warmup_frac,
            lr=self.lr, layer_decay=self.layer_decay, weight_decay=self.weight_decay, clip_norm=self.clip_norm,
            disc_lr=self.disc_lr, ema_momentum=self.ema_momentum, eval_every=self.eval_every,
            stride=self.stride, seed=self.seed, weights=self.loss_weights(), encoder=self.encoder(),
        )


def parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(key: str, value, kind: type):
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    try:
        if kind is bool:
            return parse_bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(str(value), 10) if isinstance(value, str) else int(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value)


__all__ = ["ConfigError", "RunConfig", "parse_bool"]
