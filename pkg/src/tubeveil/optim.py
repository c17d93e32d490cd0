"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .engine import Tensor
from .params import ParamDict

__all__ = ["AdamW", "cosine_lr", "scaled_base_lr", "GradientError"]


class GradientError(RuntimeError):
    """A non-finite gradient would have poisoned the parameters."""


def scaled_base_lr(batch_size: int, reference_lr: float = 0.001, reference_batch: int = 512) -> float:
    """Linear batch-size scaling of the learning rate."""
    return reference_lr * batch_size / reference_batch


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Tracks first/second moments per parameter name.

    The weight decay is decoupled: parameters shrink by lr*wd*value
    before the Adam update, so decay strength does not depend on the
    gradient scale.
    """

    def __init__(self, params: ParamDict, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, Tensor], lr: float | None = None) -> None:
        """Apply one update using `grads` (name -> gradient tensor).

        Parameters without an entry are left untouched, as are their
        moments; this is how frozen components sit out a step.
        """
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if not np.isfinite(g.data).all():
                raise GradientError(f"non-finite gradient for {name} at step {self.step_count + 1}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            p = self.params[name]
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g.data
            v *= self.beta2
            v += (1.0 - self.beta2) * g.data * g.data
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers under stable names, for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"opt.m.{k}"], copy=True)
            self.v[k] = np.array(arrays[f"opt.v.{k}"], copy=True)
        self.step_count = step_count
