"""Tubelet tokenization: videos to token grids and back.

A video of shape T x H x W x 3 is tiled by non-overlapping tubelets of
shape dt x dh x dw x 3.  Token index k = l * N + n walks temporal slices
first, then spatial cells in row-major order; within a tubelet pixels
flatten in (t, h, w, c) order.  That single convention defines a
bijection between pixel indices and (token, offset) pairs, which the
anonymizer's inverse reshape and all round-trip tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor, as_tensor, broadcast_to, clip, mul, reshape, transpose
from .engine.tensor import EngineError

__all__ = ["LayoutError", "TubeletLayout", "VideoClip", "video_to_patches",
           "patches_to_video", "embed_tokens", "add_positional",
           "decision_pixel_mask", "compose_video"]


class LayoutError(EngineError):
    """Video dimensions are not divisible by the tubelet extents."""


@dataclass(frozen=True)
class TubeletLayout:
    dt: int
    dh: int
    dw: int

    @property
    def patch_len(self) -> int:
        return 3 * self.dt * self.dh * self.dw

    def check(self, t: int, h: int, w: int) -> None:
        if t % self.dt or h % self.dh or w % self.dw:
            raise LayoutError(
                f"video {t}x{h}x{w} not divisible by tubelet {self.dt}x{self.dh}x{self.dw}"
            )

    def grid(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        """(L, GH, GW): temporal slices and the spatial cell grid."""
        self.check(t, h, w)
        return t // self.dt, h // self.dh, w // self.dw

    def token_counts(self, t: int, h: int, w: int) -> tuple[int, int]:
        l, gh, gw = self.grid(t, h, w)
        return l, gh * gw

    def token_of_pixel(self, t: int, h: int, w: int, video_shape: tuple[int, int, int]) -> tuple[int, int]:
        """Map a pixel coordinate to its (temporal slice, spatial cell) token index."""
        _, gh, gw = self.grid(*video_shape)
        return t // self.dt, (h // self.dh) * gw + (w // self.dw)


@dataclass
class VideoClip:
    """Pixels in [0, 1] plus the action class and binary privacy flags."""

    pixels: np.ndarray  # T x H x W x 3 float32
    action_label: int
    privacy_labels: np.ndarray  # P binary

    def validate(self, layout: TubeletLayout | None = None) -> None:
        t, h, w, c = self.pixels.shape
        if c != 3:
            raise LayoutError(f"expected 3 channels, got {c}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")
        if not np.all((self.privacy_labels == 0) | (self.privacy_labels == 1)):
            raise ValueError("privacy labels must be binary")
        if layout is not None:
            layout.check(t, h, w)


def _ensure_batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == ndim + 1:
        return x, False
    raise LayoutError(f"expected {ndim} or {ndim + 1} dims, got shape {x.shape}")


def video_to_patches(video, layout: TubeletLayout) -> Tensor:
    """Flatten every tubelet into a row: (B, L*N, 3*dt*dh*dw)."""
    video = as_tensor(video)
    video, _ = _ensure_batched(video, 4)
    b, t, h, w, c = video.shape
    l, gh, gw = layout.grid(t, h, w)
    x = reshape(video, (b, l, layout.dt, gh, layout.dh, gw, layout.dw, c))
    x = transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return reshape(x, (b, l * gh * gw, layout.patch_len))


def patches_to_video(patches: Tensor, layout: TubeletLayout, t: int, h: int, w: int) -> Tensor:
    """Inverse of video_to_patches: (B, L*N, patch_len) back to (B, T, H, W, 3)."""
    patches = as_tensor(patches)
    b = patches.shape[0]
    l, gh, gw = layout.grid(t, h, w)
    if patches.shape[1] != l * gh * gw or patches.shape[2] != layout.patch_len:
        raise LayoutError(f"patch grid {patches.shape} does not match layout for {t}x{h}x{w}")
    x = reshape(patches, (b, l, gh, gw, layout.dt, layout.dh, layout.dw, 3))
    x = transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return reshape(x, (b, t, h, w, 3))


def embed_tokens(patches: Tensor, w: Tensor, b: Tensor, l: int, n: int) -> Tensor:
    """Per-patch linear map (equivalent to stride=kernel 3D convolution)."""
    if patches.shape[-1] != w.shape[0]:
        raise LayoutError(f"patch length {patches.shape[-1]} != weight rows {w.shape[0]}")
    tokens = (patches @ w) + b
    return reshape(tokens, (tokens.shape[0], l, n, w.shape[1]))


def add_positional(tokens: Tensor, table: Tensor) -> Tensor:
    if tuple(table.shape) != tuple(tokens.shape[1:]):
        raise LayoutError(f"positional table {table.shape} != token grid {tokens.shape[1:]}")
    return tokens + table


def decision_pixel_mask(decision: Tensor, layout: TubeletLayout, t: int, h: int, w: int) -> Tensor:
    """Broadcast a (B, L, N) decision to per-pixel weights (B, T, H, W, 1)."""
    l, gh, gw = layout.grid(t, h, w)
    b = decision.shape[0]
    d = reshape(decision, (b, l, 1, gh, 1, gw, 1))
    d = broadcast_to(d, (b, l, layout.dt, gh, layout.dh, gw, layout.dw))
    return reshape(d, (b, t, h, w, 1))


def compose_video(anonymized: Tensor, decision: Tensor, layout: TubeletLayout) -> Tensor:
    """Keep retained tubelets, blank abandoned ones to exact zeros.

    Implemented as multiplication by the broadcast decision, so the same
    path serves training (straight-through gradients reach the decision)
    and inference (hard 0/1 entries zero pixels exactly).
    """
    anonymized = as_tensor(anonymized)
    anonymized, squeeze = _ensure_batched(anonymized, 4)
    decision = as_tensor(decision)
    if decision.ndim == 2:
        decision = reshape(decision, (1,) + decision.shape)
    b, t, h, w, _ = anonymized.shape
    mask = decision_pixel_mask(decision, layout, t, h, w)
    out = mul(anonymized, mask)
    if squeeze:
        out = reshape(out, (t, h, w, 3))
    return out


def clamp_pixels(video: Tensor) -> Tensor:
    return clip(video, 0.0, 1.0)
