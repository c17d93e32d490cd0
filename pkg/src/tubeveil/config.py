"""JSON-backed experiment configuration.

One flat dictionary drives data generation, model assembly, training
plans and evaluation.  `desk_config` is the default: small enough to
train on a CPU in minutes.  `paper_config` records the full-scale
hyperparameters for reference; it is not meant to be trained here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .data import DataConfig
from .objectives import LossWeights
from .sparsifier import SparsifierSettings
from .model import ModelSettings
from .recognizers import RecognizerSpec
from .tokenizer import TubeletLayout

__all__ = ["ConfigError", "PhasePlan", "desk_config", "paper_config", "load_config",
           "merge_config", "model_settings_from", "data_config_from",
           "recognizer_spec_from", "phase_plan_from", "loss_weights_from"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhasePlan:
    name: str
    epochs: int
    batch_size: int
    base_lr: float
    weight_decay: float = 0.05

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch size must be positive")
        if self.base_lr <= 0:
            raise ConfigError("learning rate must be positive")


def desk_config() -> dict:
    return {
        "video": {"t": 8, "h": 32, "w": 32},
        "tubelet": {"dt": 2, "dh": 8, "dw": 8},
        "model": {
            "d": 48, "heads": 4, "anon_layers": 3,
            "alpha": 0.7, "blocks": 3, "layers_per_block": 3, "tau": 1.0,
            "topk_per_frame": False, "topk_one_shot": False,
        },
        "recognizer": {"d": 48, "layers": 4, "heads": 4},
        "data": {"classes": 4, "privacy_attrs": 3, "train": 200, "test": 80},
        "phases": {
            "init": {"epochs": 20, "batch_size": 8, "base_lr": 1e-3},
            "adversarial": {"epochs": 10, "batch_size": 8, "base_lr": 5e-4},
            "eval": {"epochs": 20, "batch_size": 8, "base_lr": 1e-3},
        },
        "weights": {"action": 0.5, "privacy": 0.5},
        "weight_decay": 0.05,
        "views": {"clips": 1, "crops": 1},
        "seeds": [0, 1, 2],
    }


def paper_config() -> dict:
    """Full-scale hyperparameters, kept for reference and shape tests."""
    cfg = desk_config()
    cfg["video"] = {"t": 16, "h": 112, "w": 112}
    cfg["tubelet"] = {"dt": 2, "dh": 16, "dw": 16}
    cfg["model"].update({"d": 384, "heads": 6})
    cfg["recognizer"] = {"d": 384, "layers": 12, "heads": 6}
    cfg["phases"] = {
        # base lr follows the linear scaling rule 0.001 * batch / 512
        "init": {"epochs": 80, "batch_size": 512, "base_lr": 1e-3},
        "adversarial": {"epochs": 40, "batch_size": 512, "base_lr": 1e-3},
        "eval": {"epochs": 80, "batch_size": 512, "base_lr": 1e-3},
    }
    cfg["views"] = {"clips": 5, "crops": 3}
    return cfg


def merge_config(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Desk defaults, optionally overlaid with a JSON file and overrides."""
    cfg = desk_config()
    if path is not None:
        try:
            with open(path) as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = merge_config(cfg, loaded)
    if overrides:
        cfg = merge_config(cfg, overrides)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    for section in ("video", "tubelet", "model", "phases"):
        if section not in cfg:
            raise ConfigError(f"config missing section {section!r}")
    if cfg["model"]["d"] % 3:
        raise ConfigError("token width must be divisible by 3 for the evidence split")
    if cfg["model"]["d"] % cfg["model"]["heads"]:
        raise ConfigError("token width must be divisible by the head count")
    layout = TubeletLayout(**cfg["tubelet"])
    layout.check(cfg["video"]["t"], cfg["video"]["h"], cfg["video"]["w"])


def model_settings_from(cfg: dict) -> ModelSettings:
    m = cfg["model"]
    return ModelSettings(
        layout=TubeletLayout(**cfg["tubelet"]),
        video_shape=(cfg["video"]["t"], cfg["video"]["h"], cfg["video"]["w"]),
        d=m["d"],
        heads=m["heads"],
        anon_layers=m["anon_layers"],
        spars=SparsifierSettings(
            alpha=m["alpha"], blocks=m["blocks"], layers_per_block=m["layers_per_block"],
            tau=m["tau"], heads=m["heads"],
            topk_per_frame=m.get("topk_per_frame", False),
            topk_one_shot=m.get("topk_one_shot", False),
        ),
    )


def data_config_from(cfg: dict) -> DataConfig:
    d = cfg["data"]
    return DataConfig(t=cfg["video"]["t"], h=cfg["video"]["h"], w=cfg["video"]["w"],
                      classes=d["classes"], privacy_attrs=d["privacy_attrs"],
                      train=d["train"], test=d["test"])


def recognizer_spec_from(cfg: dict, kind: str, n_out: int) -> RecognizerSpec:
    r = cfg["recognizer"]
    video_shape = (cfg["video"]["t"], cfg["video"]["h"], cfg["video"]["w"])
    if kind == "frame-privacy":
        layout = TubeletLayout(1, cfg["tubelet"]["dh"], cfg["tubelet"]["dw"])
    else:
        layout = TubeletLayout(**cfg["tubelet"])
    return RecognizerSpec(kind=kind, n_out=n_out, layout=layout, video_shape=video_shape,
                          d=r["d"], layers=r["layers"], heads=r["heads"])


def phase_plan_from(cfg: dict, phase: str) -> PhasePlan:
    p = cfg["phases"][phase]
    return PhasePlan(name=phase, epochs=p["epochs"], batch_size=p["batch_size"],
                     base_lr=p["base_lr"], weight_decay=cfg.get("weight_decay", 0.05))


def loss_weights_from(cfg: dict) -> LossWeights:
    w = cfg.get("weights", {})
    return LossWeights(action=w.get("action", 0.5), privacy=w.get("privacy", 0.5))
