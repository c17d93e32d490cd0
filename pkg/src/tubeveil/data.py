"""Synthetic video benchmark with planted privacy markers.

Actions are sprite sweeps (left, right, up, down) over a noisy
background.  Privacy attributes are three visual markers drawn at fixed
cell-aligned locations chosen to be disjoint from every cell the sprite
can cross: a red corner patch, a striped texture patch, and a blue tint
over a set of border cells.  Because markers and motion never share a
tubelet, a transform can in principle remove all privacy evidence
without touching the action evidence.

Files: one `NNNN.clip` per sample (u32 T, H, W header then u8 RGB
frames) plus a `manifest.json` with labels, splits and marginals.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import RngState

__all__ = [
    "DataConfig", "SceneSpec", "DatasetError",
    "render_clip", "generate_dataset", "load_clip", "save_clip",
    "load_manifest", "load_split", "probe_privacy_flags", "classify_motion",
    "ACTION_NAMES", "MARKER_NAMES", "CELL", "PATCH_CELL", "STRIPE_CELL", "TINT_CELLS",
]

ACTION_NAMES = ("left", "right", "up", "down")
MARKER_NAMES = ("corner_patch", "stripe_patch", "border_tint")

CELL = 8
PATCH_CELL = (0, 0)
STRIPE_CELL = (3, 3)
TINT_CELLS = ((0, 2), (0, 3), (2, 0), (2, 3), (3, 0), (3, 2))

_SPRITE = 8
_STEP = 3
_NOISE_LO, _NOISE_HI = 0.42, 0.58
_SPRITE_VALUE = 0.92


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    t: int = 8
    h: int = 32
    w: int = 32
    classes: int = 4
    privacy_attrs: int = 3
    train: int = 200
    test: int = 80

    def validate(self) -> None:
        if self.h != 4 * CELL or self.w != 4 * CELL:
            raise DatasetError(f"frame must be {4*CELL}x{4*CELL} to fit the marker layout")
        if self.t < 2:
            raise DatasetError("need at least two frames for motion")
        if self.classes != len(ACTION_NAMES):
            raise DatasetError(f"supported action classes: {len(ACTION_NAMES)}")
        if self.privacy_attrs != len(MARKER_NAMES):
            raise DatasetError(f"supported privacy attributes: {len(MARKER_NAMES)}")
        if self.train < self.classes or self.test < self.classes:
            raise DatasetError("splits must hold at least one sample per class")
        travel = _STEP * (self.t - 1) + _SPRITE
        if travel > self.w or travel > self.h:
            raise DatasetError("sprite trajectory does not fit in frame")


@dataclass(frozen=True)
class SceneSpec:
    action: int
    privacy: tuple[int, ...]
    start: int                  # lateral offset of the first frame, in pixels

    def validate(self, cfg: DataConfig) -> None:
        if not 0 <= self.action < cfg.classes:
            raise DatasetError(f"action {self.action} out of range")
        if len(self.privacy) != cfg.privacy_attrs or any(f not in (0, 1) for f in self.privacy):
            raise DatasetError("privacy flags must be binary")
        span = cfg.w if self.action in (0, 1) else cfg.h
        lo, hi = _start_range(self.action, span, cfg.t)
        if not lo <= self.start <= hi:
            raise DatasetError(f"start {self.start} puts the trajectory out of bounds")


def _start_range(action: int, span: int, t: int) -> tuple[int, int]:
    travel = _STEP * (t - 1)
    if action in (1, 3):        # right / down: coordinate increases from start
        return 0, span - travel - _SPRITE
    return travel, span - _SPRITE


def _cell_block(video: np.ndarray, cell: tuple[int, int]) -> np.ndarray:
    r, c = cell
    return video[:, r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL, :]


def render_clip(spec: SceneSpec, cfg: DataConfig, rng: RngState) -> np.ndarray:
    """Draw one (T, H, W, 3) float clip in [0, 1]."""
    cfg.validate()
    spec.validate(cfg)
    video = rng.child("noise").uniform((cfg.t, cfg.h, cfg.w, 3),
                                       lo=_NOISE_LO, hi=_NOISE_HI).astype(np.float32)

    if spec.privacy[0]:
        _cell_block(video, PATCH_CELL)[...] = (0.85, 0.18, 0.18)
    if spec.privacy[1]:
        block = _cell_block(video, STRIPE_CELL)
        cols = (np.arange(CELL) // 2) % 2
        block[...] = np.where(cols[None, :, None] == 0, 0.85, 0.15).astype(np.float32)[None]
    if spec.privacy[2]:
        for cell in TINT_CELLS:
            block = _cell_block(video, cell)
            block[..., 2] = np.minimum(block[..., 2] + 0.3, 1.0)

    fixed = CELL          # sweeps run along cell row 1 / cell column 1
    for t in range(cfg.t):
        d = _STEP * t
        if spec.action == 0:      # left
            x, y = spec.start - d, fixed
        elif spec.action == 1:    # right
            x, y = spec.start + d, fixed
        elif spec.action == 2:    # up
            x, y = fixed, spec.start - d
        else:                     # down
            x, y = fixed, spec.start + d
        video[t, y:y + _SPRITE, x:x + _SPRITE, :] = _SPRITE_VALUE
    return video


def save_clip(path, video: np.ndarray) -> None:
    t, h, w, c = video.shape
    if c != 3:
        raise DatasetError("clips are RGB")
    quantized = np.clip(np.rint(video * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack("<III", t, h, w))
        f.write(quantized.tobytes())


def load_clip(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise DatasetError(f"clip file too short: {path}")
    t, h, w = struct.unpack("<III", buf[:12])
    body = np.frombuffer(buf, dtype=np.uint8, offset=12)
    if body.size != t * h * w * 3:
        raise DatasetError(f"clip payload size mismatch in {path}")
    return (body.reshape(t, h, w, 3).astype(np.float32)) / 255.0


def _balanced_flags(count: int, attrs: int, rng: RngState) -> np.ndarray:
    """Exactly half of `count` samples carry each flag (rounded down)."""
    flags = np.zeros((count, attrs), dtype=np.int64)
    for a in range(attrs):
        ones = count // 2
        base = np.array([1] * ones + [0] * (count - ones))
        flags[:, a] = base[rng.child(f"flag{a}").permutation(count)]
    return flags


def _split_specs(count: int, cfg: DataConfig, rng: RngState) -> list[SceneSpec]:
    per_class = count // cfg.classes
    extra = count - per_class * cfg.classes
    actions = []
    for c in range(cfg.classes):
        actions.extend([c] * (per_class + (1 if c < extra else 0)))
    actions = np.array(actions)[rng.child("order").permutation(count)]
    flags = _balanced_flags(count, cfg.privacy_attrs, rng.child("flags"))
    specs = []
    for i in range(count):
        a = int(actions[i])
        span = cfg.w if a in (0, 1) else cfg.h
        lo, hi = _start_range(a, span, cfg.t)
        start = int(rng.child(f"start{i}").integers(lo, hi + 1))
        specs.append(SceneSpec(action=a, privacy=tuple(int(f) for f in flags[i]), start=start))
    return specs


def generate_dataset(out_dir, cfg: DataConfig = DataConfig(), seed: int = 0) -> dict:
    """Write samples/NNNN.clip files plus manifest.json; returns the manifest."""
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    root = RngState(seed).child("dataset")

    samples = []
    idx = 0
    for split, count in (("train", cfg.train), ("test", cfg.test)):
        specs = _split_specs(count, cfg, root.child(split))
        for spec in specs:
            name = f"{idx:04d}.clip"
            video = render_clip(spec, cfg, root.child(f"render{idx}"))
            save_clip(out_dir / "samples" / name, video)
            samples.append({
                "id": idx,
                "file": f"samples/{name}",
                "split": split,
                "action": spec.action,
                "privacy": list(spec.privacy),
                "start": spec.start,
            })
            idx += 1

    manifest = {
        "seed": seed,
        "shape": {"t": cfg.t, "h": cfg.h, "w": cfg.w, "channels": 3},
        "classes": cfg.classes,
        "privacy_attrs": cfg.privacy_attrs,
        "action_names": list(ACTION_NAMES),
        "marker_names": list(MARKER_NAMES),
        "counts": {"train": cfg.train, "test": cfg.test},
        "samples": samples,
        "marginals": _marginals(samples, cfg),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def _marginals(samples: list[dict], cfg: DataConfig) -> dict:
    out = {}
    for split in ("train", "test"):
        rows = [s for s in samples if s["split"] == split]
        actions = np.bincount([s["action"] for s in rows], minlength=cfg.classes)
        privacy = np.sum([s["privacy"] for s in rows], axis=0)
        out[split] = {"actions": actions.tolist(),
                      "privacy": [int(p) for p in privacy]}
    return out


def load_manifest(data_dir) -> dict:
    with open(Path(data_dir) / "manifest.json") as f:
        return json.load(f)


def load_split(data_dir, split: str):
    """All of one split in memory: (videos, action labels, privacy flags)."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    rows = [s for s in manifest["samples"] if s["split"] == split]
    if not rows:
        raise DatasetError(f"split {split!r} is empty")
    videos = np.stack([load_clip(data_dir / s["file"]) for s in rows])
    actions = np.array([s["action"] for s in rows], dtype=np.int64)
    privacy = np.array([s["privacy"] for s in rows], dtype=np.int64)
    return videos, actions, privacy


# ---------------------------------------------------------------------------
# hand-coded oracles: sanity floors for learnability, and marker probes


def probe_privacy_flags(video: np.ndarray) -> np.ndarray:
    """Read the three marker flags straight off the pixels."""
    patch = _cell_block(video, PATCH_CELL)
    red = patch[..., 0].mean() - patch[..., 1].mean()

    stripe = _cell_block(video, STRIPE_CELL)
    col_means = stripe.mean(axis=(0, 1, 3))
    contrast = col_means.std()

    tint = np.stack([_cell_block(video, c) for c in TINT_CELLS])
    blue = tint[..., 2].mean() - tint[..., 0].mean()

    return np.array([red > 0.2, contrast > 0.1, blue > 0.12], dtype=np.int64)


def classify_motion(video: np.ndarray) -> int:
    """Direction of the brightest blob's travel between first and last frame."""
    gray = video.mean(axis=-1)
    centroids = []
    for t in (0, video.shape[0] - 1):
        frame = gray[t]
        mask = frame > 0.8
        if not mask.any():
            mask = frame >= np.partition(frame.ravel(), -_SPRITE * _SPRITE)[-_SPRITE * _SPRITE]
        ys, xs = np.nonzero(mask)
        centroids.append((ys.mean(), xs.mean()))
    dy = centroids[1][0] - centroids[0][0]
    dx = centroids[1][1] - centroids[0][1]
    if abs(dx) >= abs(dy):
        return 1 if dx > 0 else 0
    return 3 if dy > 0 else 2
