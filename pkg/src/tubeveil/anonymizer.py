"""Token anonymization and the journey back to pixel space.

The anonymizer runs a short masked transformer stack over the surviving
tokens, then a single linear head maps each token to a flattened pixel
patch.  Reassembling the patches through the tokenizer layout yields a
full-size video; abandoned positions are blanked by the caller with the
decision pixel mask.
"""

from __future__ import annotations

from .engine import RngState, Tensor, clip, linear, reshape
from .attention import run_layer_stack
from .params import ParamDict, init_linear, init_transformer_layer
from .tokenizer import TubeletLayout, patches_to_video

__all__ = ["init_anonymizer_params", "anonymize_tokens", "run_anonymizer_layers"]


def init_anonymizer_params(rng: RngState, d: int, patch_len: int, layers: int = 3,
                           prefix: str = "anon") -> ParamDict:
    params: ParamDict = {}
    for i in range(layers):
        init_transformer_layer(params, f"{prefix}.layers.{i}", d, rng.child(f"layer{i}"))
    init_linear(params, f"{prefix}.pixels", d, patch_len, rng.child("pixels"))
    # start at mid-gray so the [0,1] clamp has live gradients everywhere
    params[f"{prefix}.pixels.b"].data[...] = 0.5
    return params


def run_anonymizer_layers(tokens: Tensor, decision: Tensor | None, params: ParamDict,
                          prefix: str, layers: int, heads: int) -> Tensor:
    """The transformer part alone: (B, L, N, D) -> (B, L, N, D)."""
    b, l, n, d = tokens.shape
    flat = reshape(tokens, (b, l * n, d))
    dec_flat = reshape(decision, (b, l * n)) if decision is not None else None
    flat = run_layer_stack(flat, dec_flat, params, prefix, layers, heads)
    return reshape(flat, (b, l, n, d))


def anonymize_tokens(
    tokens: Tensor,
    decision: Tensor,
    params: ParamDict,
    layout: TubeletLayout,
    video_shape: tuple[int, int, int],
    prefix: str = "anon",
    layers: int = 3,
    heads: int = 4,
) -> Tensor:
    """Map sparsified tokens to an anonymized (B, T, H, W, 3) video.

    Attention among tokens is masked by the final decision matrix, so
    abandoned tokens cannot leak into retained ones.  The pixel head is
    applied to every position; the caller zeroes abandoned patches when
    composing the output.  Values are clamped to [0, 1].
    """
    t, h, w = video_shape
    b, l, n, d = tokens.shape
    x = run_anonymizer_layers(tokens, decision, params, prefix, layers, heads)
    rows = linear(x, params[f"{prefix}.pixels.w"], params[f"{prefix}.pixels.b"])
    video = patches_to_video(reshape(rows, (b, l * n, layout.patch_len)), layout, t, h, w)
    return clip(video, 0.0, 1.0)
