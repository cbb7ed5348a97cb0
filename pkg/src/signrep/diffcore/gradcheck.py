"""Central finite-difference oracle for the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor


class GradCheckError(ArithmeticError):
    """The checked function produced a non-finite value."""

    def __init__(self, message: str, location: tuple[int, ...] | None = None):
        super().__init__(message)
        self.location = location


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    max_rel_error: float
    worst_index: tuple[int, ...]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def grad_check(
    function: Callable[[Tensor], Tensor],
    point,
    epsilon: float = 1e-5,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare the backward pass of ``function`` with central differences at ``point``.

    The relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps near-zero gradients from turning round-off into huge ratios.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x0 = np.array(point, dtype=np.float64)

    x = Tensor(x0.copy(), requires_grad=True)
    out = function(x)
    if not np.all(np.isfinite(out.data)):
        raise GradCheckError("function value is not finite at the base point", ())
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    for idx in np.ndindex(*x0.shape):
        xp = x0.copy()
        xp[idx] += epsilon
        fp = function(Tensor(xp)).data
        xm = x0.copy()
        xm[idx] -= epsilon
        fm = function(Tensor(xm)).data
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"non-finite function value when perturbing index {idx}", idx)
        numeric[idx] = (float(fp) - float(fm)) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    return GradCheckReport(
        analytic=analytic,
        numeric=numeric,
        rel_errors=rel,
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        worst_index=tuple(int(i) for i in worst),
    )
