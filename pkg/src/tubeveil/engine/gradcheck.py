"""Gradient verification against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import EngineError, Tensor, backward

__all__ = ["GradCheckReport", "grad_check", "numerical_gradient"]


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    n_checked: int

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e} n={self.n_checked}"


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central finite differences of a scalar function, one element at a time."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(x)
        flat[i] = orig - eps
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: np.ndarray,
    eps: float | None = None,
    tol: float | None = None,
    dtype=np.float32,
) -> GradCheckReport:
    """Compare fn's analytic gradient at point with central differences.

    `fn` maps a Tensor to a scalar Tensor and must be deterministic (any
    noise frozen by the caller).  Default eps/tol track the dtype: 1e-2
    and 1e-3 for float32, 1e-6 and 1e-6 for float64.
    """
    if dtype == np.float64:
        eps = 1e-6 if eps is None else eps
        tol = 1e-6 if tol is None else tol
    else:
        eps = 1e-2 if eps is None else eps
        tol = 1e-3 if tol is None else tol

    x = np.array(point, dtype=dtype)

    def value(arr: np.ndarray) -> float:
        return fn(Tensor(arr.astype(dtype))).item()

    if value(x) != value(x):
        raise EngineError("grad_check target is non-deterministic")
    v0 = value(x)
    if value(x.copy()) != v0:
        raise EngineError("grad_check target is non-deterministic")

    leaf = Tensor(x.copy(), requires_grad=True)
    loss = fn(leaf)
    backward(loss)
    analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(x)).astype(np.float64)
    numeric = numerical_gradient(value, x.copy(), eps)

    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    max_rel = float(np.abs(analytic - numeric).max(initial=0.0) / denom)
    return GradCheckReport(max_rel_err=max_rel, tol=tol, passed=max_rel <= tol, n_checked=x.size)
