"""Progressive token sparsification.

Each sparsifier block runs a few masked transformer layers, aggregates
local / per-slice / global context into every token, predicts a
keep-vs-abandon probability pair per token, and draws a hard decision
through a Gumbel-Softmax straight-through estimator.  Decisions are
ANDed into a running matrix, so a token abandoned once never returns.

At inference the stochastic decisions are replaced by deterministic
top-k selection over the currently retained tokens, giving every video
in a batch the same retained count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    RngState,
    Tensor,
    broadcast_to,
    concat,
    gelu,
    linear,
    log,
    masked_mean,
    reduce_mean,
    reshape,
    slice_axis,
    softmax,
    straight_through,
)
from .engine.tensor import ShapeError, mul
from .attention import run_layer_stack
from .params import ParamDict, init_linear, init_transformer_layer

__all__ = [
    "SparsifierSettings",
    "init_sparsifier_params",
    "multi_level_aggregate",
    "predict_keep_probs",
    "gumbel_decide",
    "update_decision",
    "sparsification_loss",
    "topk_select_inference",
    "run_sparsifier_stack",
    "round_half_up",
]

KEEP_CHANNEL = 0


@dataclass(frozen=True)
class SparsifierSettings:
    alpha: float = 0.7          # keep proportion per block
    blocks: int = 3
    layers_per_block: int = 3
    tau: float = 1.0            # Gumbel-Softmax temperature
    heads: int = 4
    topk_per_frame: bool = False
    topk_one_shot: bool = False

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.blocks < 1:
            raise ValueError("need at least one sparsifier block")
        if self.tau <= 0.0:
            raise ValueError("temperature must be positive")


def init_sparsifier_params(rng: RngState, d: int, settings: SparsifierSettings,
                           prefix: str = "spars") -> ParamDict:
    if d % 3:
        raise ShapeError(f"token width {d} must be divisible by 3")
    params: ParamDict = {}
    for m in range(settings.blocks):
        block = f"{prefix}.{m}"
        brng = rng.child(f"block{m}")
        for i in range(settings.layers_per_block):
            init_transformer_layer(params, f"{block}.layers.{i}", d, brng.child(f"layer{i}"))
        for branch in ("local", "spatial", "st"):
            init_linear(params, f"{block}.agg.{branch}", d, d // 3, brng.child(branch))
        init_linear(params, f"{block}.head.fc1", d, d // 2, brng.child("fc1"))
        init_linear(params, f"{block}.head.fc2", d // 2, d // 4, brng.child("fc2"))
        init_linear(params, f"{block}.head.fc3", d // 4, 2, brng.child("fc3"))
    return params


def multi_level_aggregate(x: Tensor, decision: Tensor, params: ParamDict, prefix: str) -> Tensor:
    """Concatenate per-token, per-slice and whole-video context features.

    x is (B, L, N, D); decision is the current (B, L, N) retain matrix.
    The two averaged branches only see retained tokens; the averages use
    the zero-vector guard when nothing remains.
    """
    b, l, n, d = x.shape
    if d % 3:
        raise ShapeError(f"token width {d} must be divisible by 3")
    mask = reshape(decision, (b, l, n, 1))

    local = gelu(linear(x, params[f"{prefix}.agg.local.w"], params[f"{prefix}.agg.local.b"]))

    spatial = gelu(linear(x, params[f"{prefix}.agg.spatial.w"], params[f"{prefix}.agg.spatial.b"]))
    spatial = masked_mean(spatial, mask, axis=2, keepdims=True)
    spatial = broadcast_to(spatial, (b, l, n, d // 3))

    st = gelu(linear(x, params[f"{prefix}.agg.st.w"], params[f"{prefix}.agg.st.b"]))
    st = masked_mean(st, mask, axis=(1, 2), keepdims=True)
    st = broadcast_to(st, (b, l, n, d // 3))

    return concat([local, spatial, st], axis=-1)


def predict_keep_probs(evidence: Tensor, params: ParamDict, prefix: str) -> Tensor:
    """Per-token (keep, abandon) probabilities, shape (B, L, N, 2)."""
    h = gelu(linear(evidence, params[f"{prefix}.head.fc1.w"], params[f"{prefix}.head.fc1.b"]))
    h = gelu(linear(h, params[f"{prefix}.head.fc2.w"], params[f"{prefix}.head.fc2.b"]))
    return softmax(linear(h, params[f"{prefix}.head.fc3.w"], params[f"{prefix}.head.fc3.b"]))


def gumbel_decide(
    z: Tensor,
    tau: float,
    rng: RngState | None = None,
    train: bool = True,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Hard 0/1 keep decisions from keep probabilities.

    Training draws Gumbel noise, relaxes at temperature tau, and takes
    the argmax forward while gradients follow the soft relaxation
    (straight-through).  Eval is a noiseless argmax.  `noise` overrides
    the drawn noise so verification can freeze it.
    """
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    if not train:
        hard = (np.argmax(z.data, axis=-1) == KEEP_CHANNEL).astype(z.dtype)
        return Tensor(hard)
    if noise is None:
        if rng is None:
            raise ValueError("training-mode decisions need an rng or explicit noise")
        noise = rng.gumbel(z.shape, dtype=z.dtype)
    soft = softmax((log(z) + Tensor(noise)) * (1.0 / tau))
    hard = np.zeros_like(soft.data)
    np.put_along_axis(hard, np.argmax(soft.data, axis=-1)[..., None], 1.0, axis=-1)
    st = straight_through(soft, hard)
    keep = slice_axis(st, st.ndim - 1, KEEP_CHANNEL, KEEP_CHANNEL + 1)
    return reshape(keep, z.shape[:-1])


def update_decision(current: Tensor, new: Tensor) -> Tensor:
    """Hadamard update: a zero anywhere is permanent."""
    if current.shape != new.shape:
        raise ShapeError(f"decision shapes differ: {current.shape} vs {new.shape}")
    return mul(current, new)


def sparsification_loss(decisions: list[Tensor], alpha: float) -> Tensor:
    """Mean squared deviation of per-slice keep fractions from alpha^m.

    decisions holds the running matrix after each block (m = 1..M); the
    target for block m is alpha**m.  Fractions are taken over the
    spatial axis, then squared deviations averaged over blocks, slices
    and any batch dimension.
    """
    if not decisions:
        raise ValueError("no decision matrices given")
    total: Tensor | None = None
    for m, dec in enumerate(decisions, start=1):
        frac = reduce_mean(dec, axis=-1)            # (..., L)
        dev = frac - float(alpha) ** m
        term = reduce_mean(mul(dev, dev))
        total = term if total is None else total + term
    return total * (1.0 / len(decisions))


def round_half_up(x: float) -> int:
    # the 1e-9 absorbs binary representation error in products like 0.7 * 45,
    # which lands at 31.4999999999999964 instead of the intended 31.5
    return int(np.floor(x + 0.5 + 1e-9))


def topk_select_inference(
    z: np.ndarray,
    current: np.ndarray,
    alpha: float,
    per_frame: bool = False,
) -> np.ndarray:
    """Keep the highest-probability round(alpha * retained) tokens.

    Operates on one video: z is (L, N, 2), current is the (L, N) binary
    retain matrix.  Ties break toward the lower flattened token index.
    With per_frame=True the quota applies within each temporal slice.
    """
    l, n = current.shape
    keep_scores = z[..., KEEP_CHANNEL].reshape(-1)
    cur = current.reshape(-1)
    out = np.zeros_like(cur)
    if per_frame:
        for li in range(l):
            seg = slice(li * n, (li + 1) * n)
            out[seg] = _select_segment(keep_scores[seg], cur[seg], alpha)
        return out.reshape(l, n)
    out = _select_segment(keep_scores, cur, alpha)
    return out.reshape(l, n)


def _select_segment(scores: np.ndarray, cur: np.ndarray, alpha: float) -> np.ndarray:
    retained = np.flatnonzero(cur == 1.0)
    if retained.size == 0:
        raise ValueError("top-k selection with zero retained tokens")
    k = round_half_up(alpha * retained.size)
    k = max(1, min(k, retained.size))
    order = retained[np.argsort(-scores[retained], kind="stable")]
    out = np.zeros_like(cur)
    out[order[:k]] = 1.0
    return out


def run_sparsifier_stack(
    tokens: Tensor,
    params: ParamDict,
    prefix: str,
    settings: SparsifierSettings,
    rng: RngState | None = None,
    train: bool = True,
    forced_decisions: list[np.ndarray] | None = None,
    initial_decision: Tensor | None = None,
):
    """Run all sparsifier blocks over (B, L, N, D) tokens.

    Returns (tokens_out, decisions, keep_probs): the evolved tokens, the
    running decision matrix recorded after every block, and each block's
    keep probabilities.  `forced_decisions` replaces each block's fresh
    decision (not the running product) for verification runs.
    """
    b, l, n, d = tokens.shape
    dec = initial_decision if initial_decision is not None else Tensor(np.ones((b, l, n), dtype=tokens.dtype))
    init_dec = dec
    decisions: list[Tensor] = []
    keep_probs: list[Tensor] = []
    x = tokens
    one_shot = settings.topk_one_shot and not train and forced_decisions is None
    for m in range(settings.blocks):
        block = f"{prefix}.{m}"
        flat = reshape(x, (b, l * n, d))
        dec_flat = reshape(dec, (b, l * n))
        flat = run_layer_stack(flat, dec_flat, params, block, settings.layers_per_block, settings.heads)
        x = reshape(flat, (b, l, n, d))

        evidence = multi_level_aggregate(x, dec, params, block)
        z = predict_keep_probs(evidence, params, block)
        keep_probs.append(z)

        if forced_decisions is not None:
            fresh = Tensor(np.asarray(forced_decisions[m], dtype=x.dtype).reshape(b, l, n))
        elif train:
            block_rng = rng.child(f"decide{m}") if rng is not None else None
            fresh = gumbel_decide(z, settings.tau, block_rng, train=True)
        elif one_shot:
            # defer all pruning to a single final selection
            fresh = Tensor(np.ones((b, l, n), dtype=x.dtype))
        else:
            sel = np.stack([
                topk_select_inference(z.data[i], dec.data[i], settings.alpha, settings.topk_per_frame)
                for i in range(b)
            ])
            fresh = Tensor(sel.astype(x.dtype))
        dec = update_decision(dec, fresh)
        decisions.append(dec)

    if one_shot:
        target = settings.alpha ** settings.blocks
        z_last = keep_probs[-1]
        sel = np.stack([
            topk_select_inference(z_last.data[i], init_dec.data[i], target, settings.topk_per_frame)
            for i in range(b)
        ])
        dec = Tensor(sel.astype(x.dtype))
        decisions[-1] = dec
    return x, decisions, keep_probs
