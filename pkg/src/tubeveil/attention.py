"""Masked self-attention, pre-norm transformer layers, and the plain ViT
classifier used by the auxiliary recognizers.

The mask keeps abandoned tokens out of everyone else's attention while
every row still attends to itself, so batch shapes never change during
training.  For a row i the weight on column j is

    exp(s_ij) * m_ij / sum_k exp(s_ik) * m_ik,   m_ij = 1 if i == j else d_j,

with d the flattened 0/1 decision vector.  The decision enters
multiplicatively, so straight-through gradients reach it.
"""

from __future__ import annotations

import math

import numpy as np

from .engine import (
    Tensor,
    clip,
    concat,
    exp,
    gelu,
    layer_norm,
    linear,
    reduce_sum,
    reshape,
    slice_axis,
    softmax,
    transpose,
)
from .engine.rng import RngState
from .engine.tensor import ShapeError, div, matmul, mul
from .params import ParamDict, add_param, init_layer_norm, init_linear, init_transformer_layer
from .tokenizer import TubeletLayout, video_to_patches

__all__ = ["masked_self_attention", "transformer_layer", "run_layer_stack",
           "init_recognizer_params", "vit_classify"]

# keeps exp() finite for score entries that the mask will zero anyway;
# valid entries are <= 0 after max subtraction, so this never binds on them
_SHIFT_CAP = 60.0


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, ln, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    x = reshape(x, (b, ln, heads, d // heads))
    return transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, ln, dh = x.shape
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (b, ln, h * dh))


def masked_self_attention(
    x: Tensor,
    decision_flat: Tensor | None,
    params: ParamDict,
    prefix: str,
    heads: int,
    return_weights: bool = False,
):
    """Multi-head attention over (B, LN, D) tokens.

    decision_flat is the flattened (B, LN) retain/abandon vector or None
    for unmasked attention.  Scores are scaled by the per-head width.
    """
    b, ln, d = x.shape
    q = _split_heads(linear(x, params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.bq"]), heads)
    k = _split_heads(linear(x, params[f"{prefix}.attn.wk"], params[f"{prefix}.attn.bk"]), heads)
    v = _split_heads(linear(x, params[f"{prefix}.attn.wv"], params[f"{prefix}.attn.bv"]), heads)

    scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    scores = scores * (1.0 / math.sqrt(d // heads))

    if decision_flat is None:
        attn = softmax(scores)
    else:
        eye = Tensor(np.eye(ln, dtype=x.dtype))
        col = reshape(decision_flat, (b, 1, 1, ln))
        mask = eye + (1.0 - eye) * col  # (b, 1, ln, ln)
        # per-row max over unmasked entries only; a constant shift, so
        # treating it as such leaves the gradient exact
        with np.errstate(invalid="ignore"):
            row_max = np.where(mask.data > 0.0, scores.data, -np.inf).max(axis=-1, keepdims=True)
        shifted = clip(scores - Tensor(row_max.astype(scores.dtype)), None, _SHIFT_CAP)
        weights = exp(shifted) * mask
        attn = div(weights, reduce_sum(weights, axis=-1, keepdims=True))

    out = _merge_heads(matmul(attn, v))
    out = linear(out, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"])
    if return_weights:
        return out, attn
    return out


def transformer_layer(
    x: Tensor,
    decision_flat: Tensor | None,
    params: ParamDict,
    prefix: str,
    heads: int,
) -> Tensor:
    """Pre-norm block: x + MSA(LN(x)), then + FFN(LN(.))."""
    h = x + masked_self_attention(
        layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"]),
        decision_flat, params, prefix, heads,
    )
    z = layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    z = linear(gelu(linear(z, params[f"{prefix}.ffn.fc1.w"], params[f"{prefix}.ffn.fc1.b"])),
               params[f"{prefix}.ffn.fc2.w"], params[f"{prefix}.ffn.fc2.b"])
    return h + z


def run_layer_stack(
    x: Tensor,
    decision_flat: Tensor | None,
    params: ParamDict,
    prefix: str,
    depth: int,
    heads: int,
) -> Tensor:
    for i in range(depth):
        x = transformer_layer(x, decision_flat, params, f"{prefix}.layers.{i}", heads)
    return x


# ---------------------------------------------------------------------------
# plain ViT classifier (auxiliary recognizers)


def init_recognizer_params(
    rng: RngState,
    layout: TubeletLayout,
    video_shape: tuple[int, int, int],
    width: int,
    depth: int,
    n_out: int,
    prefix: str = "rec",
) -> ParamDict:
    t, h, w = video_shape
    l, n = layout.token_counts(t, h, w)
    params: ParamDict = {}
    init_linear(params, f"{prefix}.embed", layout.patch_len, width, rng.child("embed"))
    add_param(params, f"{prefix}.cls", rng.child("cls").normal((1, 1, width), std=0.02))
    add_param(params, f"{prefix}.pos", rng.child("pos").normal((l * n + 1, width), std=0.02))
    for i in range(depth):
        init_transformer_layer(params, f"{prefix}.layers.{i}", width, rng.child(f"layer{i}"))
    init_layer_norm(params, f"{prefix}.ln_f", width)
    init_linear(params, f"{prefix}.head", width, n_out, rng.child("head"))
    return params


def vit_classify(
    video: Tensor,
    params: ParamDict,
    prefix: str,
    layout: TubeletLayout,
    depth: int,
    heads: int,
) -> Tensor:
    """Tokenize, prepend a class token, run unmasked layers, classify.

    Returns (B, n_out) logits read from the class token.
    """
    b = video.shape[0]
    # same pixel centering as the transform's tokenizer: uncentered
    # patches stall attention training from scratch
    patches = video_to_patches(video, layout) - 0.5
    tokens = linear(patches, params[f"{prefix}.embed.w"], params[f"{prefix}.embed.b"])
    cls = params[f"{prefix}.cls"] + Tensor(np.zeros((b, 1, tokens.shape[2]), dtype=tokens.dtype))
    x = concat([cls, tokens], axis=1)
    if x.shape[1] != params[f"{prefix}.pos"].shape[0]:
        raise ShapeError(
            f"recognizer expects {params[f'{prefix}.pos'].shape[0]} tokens, got {x.shape[1]}"
        )
    x = x + params[f"{prefix}.pos"]
    x = run_layer_stack(x, None, params, prefix, depth, heads)
    x = layer_norm(x, params[f"{prefix}.ln_f.g"], params[f"{prefix}.ln_f.b"])
    cls_out = reshape(slice_axis(x, 1, 0, 1), (b, x.shape[2]))
    return linear(cls_out, params[f"{prefix}.head.w"], params[f"{prefix}.head.b"])
