"""Scalar training objectives.

Action recognition uses plain cross-entropy over class logits.  Privacy
attributes are independent binary targets, scored with the stable
softplus form of binary cross-entropy.  The adversarial objective
subtracts the privacy term, so the transform is pushed to keep action
evidence while destroying attribute evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor, as_tensor, log_softmax, mul, reduce_mean, reduce_sum, reshape, softplus

__all__ = ["LossWeights", "action_loss", "privacy_loss",
           "init_objective", "adversarial_objective"]


@dataclass(frozen=True)
class LossWeights:
    action: float = 0.5
    privacy: float = 0.5

    def __post_init__(self):
        if self.action < 0 or self.privacy < 0:
            raise ValueError("loss weights must be nonnegative")


def action_loss(logits, labels) -> Tensor:
    """Mean cross-entropy of class logits against integer labels."""
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1,) + logits.shape)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b, c = logits.shape
    if c < 2:
        raise ValueError("need at least two classes")
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label out of range")
    onehot = np.zeros((b, c), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    picked = reduce_sum(mul(log_softmax(logits), Tensor(onehot)), axis=-1)
    return -reduce_mean(picked)


def privacy_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy over samples and attributes.

    Uses the identity -[y log s(x) + (1-y) log(1-s(x))] = softplus(x) - x*y,
    which never evaluates a log near zero.
    """
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1,) + logits.shape)
    y = np.asarray(labels, dtype=logits.dtype)
    if y.ndim == 1:
        y = y[None]
    if y.shape != logits.shape:
        raise ValueError(f"labels shape {y.shape} does not match logits {logits.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("privacy labels must be binary")
    per_entry = softplus(logits) - mul(logits, Tensor(y))
    return reduce_mean(per_entry)


def init_objective(spars_loss: Tensor, a_loss: Tensor) -> Tensor:
    return spars_loss + a_loss


def adversarial_objective(spars_loss: Tensor, a_loss: Tensor, p_loss: Tensor,
                          weights: LossWeights = LossWeights()) -> Tensor:
    return spars_loss + weights.action * a_loss - weights.privacy * p_loss
