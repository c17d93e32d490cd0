"""Auxiliary recognizers: plain ViT classifiers over pixel videos.

Three kinds exist.  The action recognizer ends in a C-way softmax head,
the video-privacy recognizer in P sigmoid heads, and the frame-privacy
variant runs the same architecture over single frames and averages the
per-frame sigmoid scores into one video prediction.  Recognizers only
ever see composed videos, never the transform's internals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import RngState, Tensor, as_tensor, reshape
from .attention import init_recognizer_params, vit_classify
from .params import ParamDict
from .tokenizer import TubeletLayout

__all__ = ["RecognizerSpec", "build_recognizer", "recognize", "video_scores"]

KINDS = ("action", "video-privacy", "frame-privacy")


@dataclass(frozen=True)
class RecognizerSpec:
    kind: str
    n_out: int
    layout: TubeletLayout
    video_shape: tuple[int, int, int]
    d: int = 48
    layers: int = 4
    heads: int = 4

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown recognizer kind {self.kind!r}")
        if self.n_out < 1:
            raise ValueError("head must have at least one output")
        if self.kind == "frame-privacy" and self.layout.dt != 1:
            raise ValueError("frame recognizers tokenize single frames (dt must be 1)")
        t, h, w = self.video_shape
        frame_t = 1 if self.kind == "frame-privacy" else t
        self.layout.check(frame_t, h, w)


def build_recognizer(spec: RecognizerSpec, rng: RngState, prefix: str = "rec") -> ParamDict:
    spec.validate()
    t, h, w = spec.video_shape
    shape = (1, h, w) if spec.kind == "frame-privacy" else (t, h, w)
    return init_recognizer_params(rng, spec.layout, shape, spec.d, spec.layers,
                                  spec.n_out, prefix=prefix)


def recognize(params: ParamDict, spec: RecognizerSpec, videos, prefix: str = "rec") -> Tensor:
    """Logits for a (B, T, H, W, 3) batch.

    Video kinds return (B, n_out); the frame kind returns (B, T, n_out),
    one logit row per frame, which the caller may flatten for training
    or average through a sigmoid for scoring.
    """
    videos = as_tensor(videos)
    if videos.ndim == 4:
        videos = reshape(videos, (1,) + videos.shape)
    b, t, h, w, c = videos.shape
    if spec.kind == "frame-privacy":
        frames = reshape(videos, (b * t, 1, h, w, c))
        logits = vit_classify(frames, params, prefix, spec.layout, spec.layers, spec.heads)
        return reshape(logits, (b, t, spec.n_out))
    return vit_classify(videos, params, prefix, spec.layout, spec.layers, spec.heads)


def video_scores(params: ParamDict, spec: RecognizerSpec, videos, prefix: str = "rec") -> np.ndarray:
    """Per-video scores in [0, 1] as plain arrays, for metrics.

    Privacy kinds apply a sigmoid (frame kind averages it over frames);
    the action kind applies a softmax.
    """
    logits = recognize(params, spec, videos, prefix).data.astype(np.float64)
    if spec.kind == "frame-privacy":
        return (1.0 / (1.0 + np.exp(-logits))).mean(axis=1)
    if spec.kind == "video-privacy":
        return 1.0 / (1.0 + np.exp(-logits))
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
