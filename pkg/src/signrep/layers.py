"""Tiny module system on top of diffcore: parameter discovery plus a few layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .diffcore import Tensor, gelu, layer_norm, matmul


class Module:
    """Parameters are Tensor attributes with ``requires_grad``; children are Module attributes or lists of them."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def const(p: Tensor, frozen: bool) -> Tensor:
    """Use a parameter as a graph constant when ``frozen``."""
    return Tensor(p.data) if frozen else p


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, init_std: float | None = None):
        std = init_std if init_std is not None else 1.0 / np.sqrt(n_in)
        self.weight = _param(rng.normal(0.0, std, size=(n_in, n_out)))
        self.bias = _param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        y = matmul(x, const(self.weight, frozen))
        if self.bias is not None:
            y = y + const(self.bias, frozen)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        return layer_norm(x, const(self.gamma, frozen), const(self.beta, frozen), self.eps)


class MLP(Module):
    """Linear layers with GELU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x, frozen)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x
