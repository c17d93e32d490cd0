"""Full transform pipeline: video in, privacy-reduced video out.

Assembles the tokenizer, the progressive sparsifier and the anonymizer
into one parameterized model.  Two forward paths exist: the masked path
keeps every token and silences abandoned ones through attention masks
and the final pixel mask (differentiable, used for training), and a
pruned path that physically drops abandoned tokens (used to verify the
masking really is equivalent, and as a leaner inference route).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import (
    RngState,
    Tensor,
    as_tensor,
    broadcast_to,
    clip,
    concat,
    gelu,
    linear,
    matmul,
    reduce_mean,
    reshape,
)
from .anonymizer import anonymize_tokens, init_anonymizer_params, run_anonymizer_layers
from .attention import run_layer_stack
from .params import ParamDict, add_param, init_linear
from .sparsifier import (
    SparsifierSettings,
    init_sparsifier_params,
    multi_level_aggregate,
    predict_keep_probs,
    round_half_up,
    run_sparsifier_stack,
)
from .tokenizer import (
    TubeletLayout,
    add_positional,
    compose_video,
    patches_to_video,
    video_to_patches,
)

__all__ = ["ModelSettings", "TransformResult", "init_model_params",
           "forward_sparsify", "forward_transform", "forward_transform_pruned"]


@dataclass(frozen=True)
class ModelSettings:
    layout: TubeletLayout
    video_shape: tuple[int, int, int]       # (T, H, W)
    d: int = 48
    heads: int = 4
    anon_layers: int = 3
    spars: SparsifierSettings = field(default_factory=SparsifierSettings)

    def token_grid(self) -> tuple[int, int]:
        t, h, w = self.video_shape
        l, gh, gw = self.layout.grid(t, h, w)
        return l, gh * gw


@dataclass
class TransformResult:
    video: Tensor                  # (B, T, H, W, 3), abandoned regions zero
    decisions: list[Tensor]        # running decision after each block, (B, L, N)
    keep_probs: list[Tensor]       # per-block (B, L, N, 2)
    tokens: Tensor                 # sparsifier output tokens (B, L, N, D)

    @property
    def retained_counts(self) -> list[int]:
        return [int(d.data[0].sum()) for d in self.decisions]


def init_model_params(rng: RngState, settings: ModelSettings, prefix: str = "model") -> ParamDict:
    l, n = settings.token_grid()
    params: ParamDict = {}
    init_linear(params, f"{prefix}.embed", settings.layout.patch_len, settings.d, rng.child("embed"))
    add_param(params, f"{prefix}.pos",
              (0.02 * rng.child("pos").normal((l, n, settings.d))).astype(np.float32))
    params.update(init_sparsifier_params(rng.child("spars"), settings.d, settings.spars,
                                         prefix=f"{prefix}.spars"))
    params.update(init_anonymizer_params(rng.child("anon"), settings.d, settings.layout.patch_len,
                                         settings.anon_layers, prefix=f"{prefix}.anon"))
    return params


def _tokenize(video, params: ParamDict, settings: ModelSettings, prefix: str) -> Tensor:
    l, n = settings.token_grid()
    # center pixels before embedding: all-positive patches share a large
    # common component that stalls attention training from scratch
    patches = video_to_patches(video, settings.layout) - 0.5
    w = params[f"{prefix}.embed.w"]
    tokens = reshape((patches @ w) + params[f"{prefix}.embed.b"],
                     (patches.shape[0], l, n, settings.d))
    return add_positional(tokens, params[f"{prefix}.pos"])


def forward_sparsify(
    params: ParamDict,
    settings: ModelSettings,
    video,
    rng: RngState | None = None,
    train: bool = True,
    forced_decisions: list[np.ndarray] | None = None,
    prefix: str = "model",
):
    """Tokenize and sparsify only: (tokens, decisions, keep_probs).

    The initialization phase trains on these directly and never needs
    the anonymizer forward.
    """
    tokens = _tokenize(video, params, settings, prefix)
    return run_sparsifier_stack(
        tokens, params, f"{prefix}.spars", settings.spars, rng=rng, train=train,
        forced_decisions=forced_decisions)


def forward_transform(
    params: ParamDict,
    settings: ModelSettings,
    video,
    rng: RngState | None = None,
    train: bool = True,
    forced_decisions: list[np.ndarray] | None = None,
    prefix: str = "model",
) -> TransformResult:
    """Masked-mode transform of a (B, T, H, W, 3) video batch."""
    tokens, decisions, keep_probs = forward_sparsify(
        params, settings, video, rng=rng, train=train,
        forced_decisions=forced_decisions, prefix=prefix)
    final = decisions[-1]
    anonymized = anonymize_tokens(tokens, final, params, settings.layout, settings.video_shape,
                                  prefix=f"{prefix}.anon", layers=settings.anon_layers,
                                  heads=settings.heads)
    out = compose_video(anonymized, final, settings.layout)
    return TransformResult(video=out, decisions=decisions, keep_probs=keep_probs, tokens=tokens)


def _gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a (1, n, d) sequence with a 0/1 matrix product."""
    n = x.shape[1]
    sel = np.zeros((1, idx.size, n), dtype=x.dtype)
    sel[0, np.arange(idx.size), idx] = 1.0
    return matmul(Tensor(sel), x)


def _slice_means(feat: Tensor, slice_ids: np.ndarray, l: int) -> Tensor:
    """Per-slice means of active-token features, mapped back to tokens.

    feat is (1, n_act, dp).  Empty slices contribute zero, mirroring the
    masked path's guarded mean.
    """
    n_act = feat.shape[1]
    onehot = np.zeros((l, n_act), dtype=feat.dtype)
    onehot[slice_ids, np.arange(n_act)] = 1.0
    counts = np.maximum(onehot.sum(axis=1, keepdims=True), 1.0)
    pool = Tensor((onehot / counts)[None])          # (1, L, n_act)
    sums = matmul(pool, feat)                       # (1, L, dp)
    expand = Tensor(onehot.T[None])                 # (1, n_act, L)
    return matmul(expand, sums)


def forward_transform_pruned(
    params: ParamDict,
    settings: ModelSettings,
    video,
    forced_decisions: list[np.ndarray] | None = None,
    prefix: str = "model",
) -> TransformResult:
    """Physically pruned twin of forward_transform, single video only.

    Abandoned tokens are dropped from the sequence instead of masked, so
    later blocks never see them at all.  With the same decisions the
    retained-row outputs match the masked path to float precision.
    """
    video = as_tensor(video)
    if video.ndim == 4:
        video = reshape(video, (1,) + video.shape)
    if video.shape[0] != 1:
        raise ValueError("pruned path handles one video at a time")
    t, h, w = settings.video_shape
    l, n = settings.token_grid()
    spars = settings.spars
    sp = f"{prefix}.spars"

    tokens = _tokenize(video, params, settings, prefix)
    x = reshape(tokens, (1, l * n, settings.d))
    active = np.arange(l * n)
    decisions: list[Tensor] = []
    keep_probs: list[Tensor] = []

    for m in range(spars.blocks):
        block = f"{sp}.{m}"
        x = run_layer_stack(x, None, params, block, spars.layers_per_block, spars.heads)

        slice_ids = active // n
        local = gelu(linear(x, params[f"{block}.agg.local.w"], params[f"{block}.agg.local.b"]))
        spatial = gelu(linear(x, params[f"{block}.agg.spatial.w"], params[f"{block}.agg.spatial.b"]))
        spatial = _slice_means(spatial, slice_ids, l)
        st = gelu(linear(x, params[f"{block}.agg.st.w"], params[f"{block}.agg.st.b"]))
        st = broadcast_to(reduce_mean(st, axis=1, keepdims=True), spatial.shape)
        z = predict_keep_probs(concat([local, spatial, st], axis=-1), params, block)
        keep_probs.append(z)

        if forced_decisions is not None:
            fresh = np.asarray(forced_decisions[m]).reshape(-1)[active]
            keep_local = np.flatnonzero(fresh == 1.0)
        else:
            k = max(1, min(round_half_up(spars.alpha * active.size), active.size))
            order = np.argsort(-z.data[0, :, 0], kind="stable")
            keep_local = np.sort(order[:k])
        x = _gather(x, keep_local)
        active = active[keep_local]
        dec = np.zeros((1, l, n), dtype=x.dtype)
        dec.reshape(1, -1)[0, active] = 1.0
        decisions.append(Tensor(dec))

    scatter = np.zeros((1, l * n, active.size), dtype=x.dtype)
    scatter[0, active, np.arange(active.size)] = 1.0
    spars_tokens = reshape(matmul(Tensor(scatter), x), (1, l, n, settings.d))

    anon = f"{prefix}.anon"
    x = run_layer_stack(x, None, params, anon, settings.anon_layers, settings.heads)
    rows = linear(x, params[f"{anon}.pixels.w"], params[f"{anon}.pixels.b"])
    full_rows = matmul(Tensor(scatter), rows)
    out = clip(patches_to_video(full_rows, settings.layout, t, h, w), 0.0, 1.0)
    return TransformResult(video=out, decisions=decisions, keep_probs=keep_probs,
                           tokens=spars_tokens)
