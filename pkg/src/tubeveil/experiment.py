"""End-to-end experiment orchestration.

One experiment = raw-video control plus the full three-phase pipeline
on the synthetic benchmark, for one seed.  The control trains the same
recognizer architectures on untouched videos, giving the reference
numbers the transform is judged against: the action gap should stay
small while the privacy gap grows.  Sweeps rerun the pipeline across a
hyperparameter axis with a reduced schedule and collect one CSV row per
setting.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .engine import RngState
from .config import (
    PhasePlan,
    data_config_from,
    loss_weights_from,
    merge_config,
    model_settings_from,
    phase_plan_from,
    recognizer_spec_from,
)
from .data import MARKER_NAMES, generate_dataset, load_manifest, load_split
from .metrics import MetricsReport, cmap, f1
from .model import init_model_params
from .training import (
    evaluate_recognizers,
    run_phase_adversarial,
    run_phase_eval,
    run_phase_init,
    train_recognizer,
    transform_dataset,
    _batched_scores,
)

__all__ = ["ensure_dataset", "run_experiment", "run_raw_control", "run_seeds",
           "sweep", "ABLATION_VALUES", "write_report_files"]

ABLATION_VALUES = {
    "alpha": (0.5, 0.7, 0.9),
    "dt": (1, 2, 4),
    "lambda": (0.25, 0.5, 1.0),
}

# shortened schedule for sweeps, where nine full runs would be excessive
SWEEP_EPOCHS = {"init": 8, "adversarial": 5, "eval": 10}


def ensure_dataset(data_dir, cfg: dict, seed: int = 0) -> dict:
    """Generate the benchmark unless a manifest already exists."""
    data_dir = Path(data_dir)
    if (data_dir / "manifest.json").exists():
        return load_manifest(data_dir)
    return generate_dataset(data_dir, data_config_from(cfg), seed=seed)


def _train_controls(cfg: dict, train, test, rng: RngState, seed: int,
                    with_frame: bool = True) -> dict:
    """Recognizers trained on raw videos: the no-transform reference."""
    trv, tra, trp = train
    tev, tea, tep = test
    plan = phase_plan_from(cfg, "eval")
    aspec = recognizer_spec_from(cfg, "action", cfg["data"]["classes"])
    pspec = recognizer_spec_from(cfg, "video-privacy", cfg["data"]["privacy_attrs"])
    rec_a, _ = train_recognizer(aspec, trv, tra, plan, rng.child("raw_action"))
    rec_p, _ = train_recognizer(pspec, trv, trp, plan, rng.child("raw_privacy"))
    report = evaluate_recognizers(rec_a, aspec, rec_p, pspec, tev, tea, tep,
                                  attribute_names=list(MARKER_NAMES), seed=seed)
    out = {"report": report}
    if with_frame:
        fspec = recognizer_spec_from(cfg, "frame-privacy", cfg["data"]["privacy_attrs"])
        rec_f, _ = train_recognizer(fspec, trv, trp, plan, rng.child("raw_frame"))
        scores = _batched_scores(rec_f, fspec, tev, "rec")
        out["frame_privacy"] = {"cmap": cmap(scores, tep), "f1": f1(scores, tep)}
    return out


def run_raw_control(cfg: dict, data_dir, seed: int, with_frame: bool = True) -> dict:
    """Just the no-transform reference, on the same rng stream a full
    experiment with this seed would use for it."""
    train = load_split(data_dir, "train")
    test = load_split(data_dir, "test")
    return _train_controls(cfg, train, test, RngState(seed).child("control"), seed,
                           with_frame=with_frame)


def run_experiment(cfg: dict, data_dir, seed: int, checkpoint_dir=None,
                   with_frame: bool = True, with_raw_control: bool = True) -> dict:
    """Raw control plus phases 1-3 for one seed; returns all reports."""
    train = load_split(data_dir, "train")
    test = load_split(data_dir, "test")
    trv, tra, trp = train
    tev, tea, tep = test
    rng = RngState(seed)

    result: dict = {"seed": seed}
    if with_raw_control:
        result["raw"] = _train_controls(cfg, train, test, rng.child("control"), seed,
                                        with_frame=with_frame)

    settings = model_settings_from(cfg)
    params = init_model_params(rng.child("model"), settings)
    result["history_init"] = run_phase_init(
        params, settings, trv, tra, cfg["data"]["classes"],
        phase_plan_from(cfg, "init"), rng.child("phase_init"),
        checkpoint_dir=checkpoint_dir, config_snapshot=cfg)
    aspec = recognizer_spec_from(cfg, "action", cfg["data"]["classes"])
    pspec = recognizer_spec_from(cfg, "video-privacy", cfg["data"]["privacy_attrs"])
    result["history_adversarial"] = run_phase_adversarial(
        params, settings, trv, tra, trp, aspec, pspec,
        phase_plan_from(cfg, "adversarial"), rng.child("phase_adv"),
        loss_weights_from(cfg), checkpoint_dir=checkpoint_dir, config_snapshot=cfg)
    fspec = recognizer_spec_from(cfg, "frame-privacy", cfg["data"]["privacy_attrs"]) \
        if with_frame else None
    eval_out = run_phase_eval(
        params, settings, trv, tra, trp, tev, tea, tep, aspec, pspec,
        phase_plan_from(cfg, "eval"), rng.child("phase_eval"), frame_spec=fspec,
        attribute_names=list(MARKER_NAMES), seed=seed, config_snapshot=cfg)
    result["pipeline"] = {"report": eval_out["report"],
                          "retained_counts": eval_out["retained_counts"]}
    if with_frame:
        result["pipeline"]["frame_privacy"] = eval_out["frame_privacy"]
    result["params"] = params
    return result


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def run_seeds(cfg: dict, data_dir, seeds=None, checkpoint_dir=None,
              with_frame: bool = True) -> dict:
    """Run every seed and aggregate the headline metrics by median."""
    seeds = list(cfg.get("seeds", [0, 1, 2]) if seeds is None else seeds)
    runs = [run_experiment(cfg, data_dir, s,
                           checkpoint_dir=None if checkpoint_dir is None
                           else f"{checkpoint_dir}/seed{s}",
                           with_frame=with_frame)
            for s in seeds]
    agg = {"seeds": seeds, "runs": runs}
    for side in ("raw", "pipeline"):
        reports = [r[side]["report"] for r in runs if side in r]
        if reports:
            agg[f"{side}_median"] = {
                "top1": _median([rep.top1 for rep in reports]),
                "cmap": _median([rep.cmap for rep in reports]),
                "f1": _median([rep.f1 for rep in reports]),
            }
        if with_frame and runs and side in runs[0]:
            frames = [r[side]["frame_privacy"]["cmap"] for r in runs]
            agg[f"{side}_frame_cmap_median"] = _median(frames)
    return agg


def sweep(cfg: dict, data_dir, axis: str, seeds=None, values=None) -> list[dict]:
    """Rerun the pipeline along one hyperparameter axis.

    Returns one row per setting with median-of-seeds metrics.  Uses the
    shortened sweep schedule; rows are comparable to each other, not to
    full-schedule runs.
    """
    if axis not in ABLATION_VALUES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(ABLATION_VALUES)}")
    values = list(ABLATION_VALUES[axis] if values is None else values)
    seeds = list(cfg.get("seeds", [0, 1, 2]) if seeds is None else seeds)
    rows = []
    for value in values:
        run_cfg = merge_config(cfg, {"phases": {
            name: {"epochs": SWEEP_EPOCHS[name]} for name in SWEEP_EPOCHS}})
        if axis == "alpha":
            run_cfg = merge_config(run_cfg, {"model": {"alpha": value}})
        elif axis == "dt":
            run_cfg = merge_config(run_cfg, {"tubelet": {"dt": int(value)}})
        else:
            run_cfg = merge_config(run_cfg, {"weights": {"action": value, "privacy": value}})
        per_seed = [run_experiment(run_cfg, data_dir, s, with_frame=False,
                                   with_raw_control=False)
                    for s in seeds]
        reports = [r["pipeline"]["report"] for r in per_seed]
        rows.append({
            "axis": axis,
            "value": value,
            "top1": _median([rep.top1 for rep in reports]),
            "cmap": _median([rep.cmap for rep in reports]),
            "f1": _median([rep.f1 for rep in reports]),
            "retained_counts": per_seed[0]["pipeline"]["retained_counts"],
        })
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["setting", "top1", "cmap", "f1"])
    for row in rows:
        writer.writerow([f"{row['axis']}={row['value']}",
                         f"{row['top1']:.4f}", f"{row['cmap']:.4f}", f"{row['f1']:.6f}"])
    return buf.getvalue()


def write_report_files(out_dir, report: MetricsReport, stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    csv_path = out_dir / f"{stem}.csv"
    json_path.write_text(report.to_json())
    csv_path.write_text(report.to_csv())
    return json_path, csv_path


def summary_json(agg: dict) -> str:
    """Median summary without the bulky per-run payloads."""
    out = {k: v for k, v in agg.items() if k not in ("runs",)}
    out["per_seed"] = [{
        "seed": r["seed"],
        **({"raw_top1": r["raw"]["report"].top1,
            "raw_cmap": r["raw"]["report"].cmap,
            "raw_f1": r["raw"]["report"].f1} if "raw" in r else {}),
        "pipeline_top1": r["pipeline"]["report"].top1,
        "pipeline_cmap": r["pipeline"]["report"].cmap,
        "pipeline_f1": r["pipeline"]["report"].f1,
        "retained_counts": r["pipeline"]["retained_counts"],
    } for r in agg.get("runs", [])]
    return json.dumps(out, indent=1, sort_keys=True)
