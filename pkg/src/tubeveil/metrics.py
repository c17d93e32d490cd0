"""Evaluation metrics, report serialization and frame dumps.

Accuracy supports multi-view averaging (several clips and crops per
video whose logits are averaged before the argmax).  Privacy quality is
summarized by class-wise mean average precision and macro F1 with fixed
tie and zero-denominator conventions so results are deterministic.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .tokenizer import TubeletLayout, decision_pixel_mask
from .engine import Tensor

__all__ = ["MetricsReport", "top1_accuracy", "cmap", "f1", "average_precision",
           "per_attribute_f1", "make_views", "dump_frames"]


def top1_accuracy(logits: np.ndarray, labels: np.ndarray, views_per_video: int = 1) -> float:
    """Percent of videos whose view-averaged logits argmax to the label.

    logits has one row per view, grouped contiguously by video.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if views_per_video < 1:
        raise ValueError("need at least one view per video")
    if logits.shape[0] != labels.shape[0] * views_per_video:
        raise ValueError(
            f"{logits.shape[0]} view rows do not cover {labels.shape[0]} videos "
            f"x {views_per_video} views")
    per_video = logits.reshape(labels.shape[0], views_per_video, -1).mean(axis=1)
    return float((per_video.argmax(axis=1) == labels).mean() * 100.0)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Non-interpolated AP for one attribute; ties keep sample order."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)
    precision = hits / np.arange(1, len(ranked) + 1)
    return float((precision * ranked).sum() / n_pos)


def cmap(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AP over attributes that have at least one positive, x100."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    aps = [average_precision(scores[:, a], labels[:, a])
           for a in range(scores.shape[1]) if labels[:, a].sum() > 0]
    if not aps:
        raise ValueError("no attribute has any positive label")
    return float(np.mean(aps) * 100.0)


def per_attribute_f1(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> list[float]:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    preds = scores >= threshold
    out = []
    for a in range(scores.shape[1]):
        tp = int(np.sum(preds[:, a] & (labels[:, a] == 1)))
        fp = int(np.sum(preds[:, a] & (labels[:, a] == 0)))
        fn = int(np.sum(~preds[:, a] & (labels[:, a] == 1)))
        denom = 2 * tp + fp + fn
        out.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return out


def f1(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Macro F1 over attributes, in [0, 1]."""
    return float(np.mean(per_attribute_f1(scores, labels, threshold)))


@dataclass
class MetricsReport:
    top1: float
    cmap: float
    f1: float
    per_class_ap: list[float] = field(default_factory=list)
    per_class_f1: list[float] = field(default_factory=list)
    attribute_names: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.top1 <= 100.0 and 0.0 <= self.cmap <= 100.0):
            raise ValueError("accuracy metrics must be percentages")
        if not 0.0 <= self.f1 <= 1.0:
            raise ValueError("f1 is a decimal in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value", "class", "seed"])
        writer.writerow(["top1", f"{self.top1:.4f}", "", self.seed])
        writer.writerow(["cmap", f"{self.cmap:.4f}", "", self.seed])
        writer.writerow(["f1", f"{self.f1:.6f}", "", self.seed])
        names = self.attribute_names or [str(i) for i in range(len(self.per_class_ap))]
        for name, ap in zip(names, self.per_class_ap):
            writer.writerow(["ap", f"{ap:.6f}", name, self.seed])
        for name, score in zip(names, self.per_class_f1):
            writer.writerow(["class_f1", f"{score:.6f}", name, self.seed])
        return buf.getvalue()


def make_views(video: np.ndarray, n_clips: int = 1, n_crops: int = 1,
               clip_len: int | None = None, crop: int | None = None) -> np.ndarray:
    """Expand one video into n_clips x n_crops views.

    Clip starts are spread uniformly over the valid range; crops slide
    horizontally (left, center, right) at a centered vertical offset.
    With the desk default of 1x1 the input comes back unchanged.
    """
    t, h, w, c = video.shape
    clip_len = t if clip_len is None else clip_len
    crop = min(h, w) if crop is None else crop
    if clip_len > t or crop > min(h, w):
        raise ValueError("view geometry larger than the video")
    starts = np.round(np.linspace(0, t - clip_len, n_clips)).astype(int)
    x_offsets = np.round(np.linspace(0, w - crop, n_crops)).astype(int)
    y = (h - crop) // 2
    views = []
    for s in starts:
        for x in x_offsets:
            views.append(video[s:s + clip_len, y:y + crop, x:x + crop, :])
    return np.stack(views)


def dump_frames(video: np.ndarray, out_dir, decision: np.ndarray | None = None,
                layout: TubeletLayout | None = None) -> list[Path]:
    """Write each frame as a binary PPM; abandoned tubelets render black."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    video = np.asarray(video, dtype=np.float64)
    t, h, w, _ = video.shape
    if decision is not None:
        if layout is None:
            raise ValueError("a decision needs its tubelet layout to map to pixels")
        dec = Tensor(np.asarray(decision, dtype=np.float64)[None])
        mask = decision_pixel_mask(dec, layout, t, h, w).data[0]
        video = video * mask
    paths = []
    for i in range(t):
        frame = np.clip(np.rint(video[i] * 255.0), 0, 255).astype(np.uint8)
        path = out_dir / f"frame_{i:04d}.ppm"
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(frame.tobytes())
        paths.append(path)
    return paths
