"""HTTP service exposing the pipeline.

Each endpoint wraps one unit of the workflow: dataset generation, the
three training phases (individually resumable from checkpoints, or all
at once), batch transformation of stored clips, recognizer evaluation,
ablation sweeps, and the gradient verification suite.  The bundled CLI
talks to this app in-process by default, so the same handlers back both
entry points.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..checkpoint import CheckpointError
from ..config import (
    ConfigError,
    data_config_from,
    load_config,
    model_settings_from,
    phase_plan_from,
    recognizer_spec_from,
    loss_weights_from,
)
from ..data import MARKER_NAMES, generate_dataset, load_split, save_clip
from ..engine import EngineError, RngState
from ..experiment import (
    run_experiment,
    run_raw_control,
    sweep,
    sweep_csv,
    write_report_files,
)
from ..metrics import dump_frames
from ..model import init_model_params
from ..optim import GradientError
from ..training import (
    TrainingError,
    load_phase_state,
    run_phase_adversarial,
    run_phase_eval,
    run_phase_init,
    transform_dataset,
)
from ..verification import run_suite
from . import schemas as S

__all__ = ["create_app"]


def _resolve_config(req: S.ConfiguredRequest, meta: dict | None = None) -> dict:
    """Layer the request's config; fall back to the checkpoint's snapshot."""
    if req.config_path is None and not req.overrides and meta and meta.get("config"):
        return load_config(None, meta["config"])
    return load_config(req.config_path, req.overrides)


def _last_checkpoint(out_dir: str | None, phase: str, epochs: int) -> str | None:
    if out_dir is None:
        return None
    return str(Path(out_dir) / f"{phase}_epoch{epochs - 1:03d}.ckpt")


def _require_resume(req: S.TrainRequest) -> tuple[dict, dict, dict]:
    if req.resume is None:
        raise TrainingError(
            f"phase {req.phase!r} continues an earlier phase; pass a checkpoint to resume")
    params, meta = load_phase_state(req.resume)
    cfg = _resolve_config(req, meta)
    return params, meta, cfg


def _train_init(req: S.TrainRequest) -> S.TrainResponse:
    cfg = _resolve_config(req)
    settings = model_settings_from(cfg)
    root = RngState(req.seed)
    params = init_model_params(root.child("model"), settings)
    trv, tra, _ = load_split(req.data_dir, "train")
    plan = phase_plan_from(cfg, "init")
    history = run_phase_init(params, settings, trv, tra, cfg["data"]["classes"],
                             plan, root.child("phase_init"),
                             checkpoint_dir=req.out_dir, config_snapshot=cfg)
    return S.TrainResponse(phase="init", seed=req.seed, history=history,
                           checkpoint=_last_checkpoint(req.out_dir, "init", plan.epochs))


def _train_adversarial(req: S.TrainRequest) -> S.TrainResponse:
    params, _, cfg = _require_resume(req)
    settings = model_settings_from(cfg)
    trv, tra, trp = load_split(req.data_dir, "train")
    plan = phase_plan_from(cfg, "adversarial")
    aspec = recognizer_spec_from(cfg, "action", cfg["data"]["classes"])
    pspec = recognizer_spec_from(cfg, "video-privacy", cfg["data"]["privacy_attrs"])
    history = run_phase_adversarial(
        params, settings, trv, tra, trp, aspec, pspec, plan,
        RngState(req.seed).child("phase_adv"), loss_weights_from(cfg),
        checkpoint_dir=req.out_dir, config_snapshot=cfg)
    return S.TrainResponse(phase="adversarial", seed=req.seed, history=history,
                           checkpoint=_last_checkpoint(req.out_dir, "adversarial",
                                                       plan.epochs))


def _train_eval(req: S.TrainRequest) -> S.TrainResponse:
    params, _, cfg = _require_resume(req)
    settings = model_settings_from(cfg)
    trv, tra, trp = load_split(req.data_dir, "train")
    tev, tea, tep = load_split(req.data_dir, "test")
    aspec = recognizer_spec_from(cfg, "action", cfg["data"]["classes"])
    pspec = recognizer_spec_from(cfg, "video-privacy", cfg["data"]["privacy_attrs"])
    fspec = recognizer_spec_from(cfg, "frame-privacy", cfg["data"]["privacy_attrs"]) \
        if req.with_frame else None
    out = run_phase_eval(params, settings, trv, tra, trp, tev, tea, tep,
                         aspec, pspec, phase_plan_from(cfg, "eval"),
                         RngState(req.seed).child("phase_eval"), frame_spec=fspec,
                         attribute_names=list(MARKER_NAMES), seed=req.seed,
                         config_snapshot=cfg)
    report = out["report"]
    if req.out_dir is not None:
        write_report_files(req.out_dir, report)
    return S.TrainResponse(
        phase="eval", seed=req.seed,
        report=S.ReportModel.from_report(report),
        frame_privacy=out.get("frame_privacy"),
        retained_counts=out["retained_counts"],
        report_csv=report.to_csv())


def _train_all(req: S.TrainRequest) -> S.TrainResponse:
    cfg = _resolve_config(req)
    result = run_experiment(cfg, req.data_dir, req.seed, checkpoint_dir=req.out_dir,
                            with_frame=req.with_frame,
                            with_raw_control=req.with_raw_control)
    report = result["pipeline"]["report"]
    if req.out_dir is not None:
        write_report_files(req.out_dir, report)
    history = {f"init.{k}": v for k, v in result["history_init"].items()}
    history.update({f"adversarial.{k}": v
                    for k, v in result["history_adversarial"].items()})
    raw = result.get("raw")
    return S.TrainResponse(
        phase="all", seed=req.seed, history=history,
        checkpoint=_last_checkpoint(req.out_dir, "adversarial",
                                    phase_plan_from(cfg, "adversarial").epochs),
        report=S.ReportModel.from_report(report),
        raw_report=None if raw is None else S.ReportModel.from_report(raw["report"]),
        frame_privacy=result["pipeline"].get("frame_privacy"),
        raw_frame_privacy=None if raw is None else raw.get("frame_privacy"),
        retained_counts=result["pipeline"]["retained_counts"],
        report_csv=report.to_csv())


def create_app() -> FastAPI:
    app = FastAPI(title="tubeveil", version=__version__)

    def _detail(status: int):
        def handler(request: Request, exc: Exception) -> JSONResponse:
            return JSONResponse({"detail": str(exc)}, status_code=status)
        return handler

    for exc_type in (ConfigError, ValueError, TrainingError, CheckpointError,
                     GradientError, EngineError):
        app.add_exception_handler(exc_type, _detail(400))
    for exc_type in (FileNotFoundError, NotADirectoryError):
        app.add_exception_handler(exc_type, _detail(404))

    @app.get("/health", response_model=S.HealthResponse)
    def health() -> S.HealthResponse:
        return S.HealthResponse(version=__version__)

    @app.post("/datasets", response_model=S.GenDataResponse)
    def gen_data(req: S.GenDataRequest) -> S.GenDataResponse:
        cfg = _resolve_config(req)
        manifest = generate_dataset(req.out_dir, data_config_from(cfg), seed=req.seed)
        shape = manifest["shape"]
        return S.GenDataResponse(
            manifest_path=str(Path(req.out_dir) / "manifest.json"),
            counts={k: int(v) for k, v in manifest["counts"].items()},
            classes=int(manifest["classes"]),
            privacy_attrs=int(manifest["privacy_attrs"]),
            shape=[int(shape[k]) for k in ("t", "h", "w", "channels")])

    @app.post("/train", response_model=S.TrainResponse)
    def train(req: S.TrainRequest) -> S.TrainResponse:
        run = {"init": _train_init, "adversarial": _train_adversarial,
               "eval": _train_eval, "all": _train_all}[req.phase]
        return run(req)

    @app.post("/transform", response_model=S.TransformResponse)
    def transform(req: S.TransformRequest) -> S.TransformResponse:
        params, meta = load_phase_state(req.checkpoint)
        cfg = load_config(None, meta.get("config") or {})
        settings = model_settings_from(cfg)
        videos, _, _ = load_split(req.data_dir, req.split)
        if req.limit is not None:
            videos = videos[:req.limit]
        transformed, counts = transform_dataset(params, settings, videos)
        out_dir = Path(req.out_dir)
        clip_dir = out_dir / "clips"
        clip_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, clip in enumerate(transformed):
            path = clip_dir / f"{i:04d}.clip"
            save_clip(path, clip)
            paths.append(str(path))
        frames_dir = None
        if req.dump_frames and len(transformed):
            frames_dir = str(out_dir / "frames")
            dump_frames(transformed[0], frames_dir)
        return S.TransformResponse(out_dir=str(out_dir), clips=paths,
                                   retained_counts=counts, frames_dir=frames_dir)

    @app.post("/evaluate", response_model=S.EvalResponse)
    def evaluate(req: S.EvalRequest) -> S.EvalResponse:
        if req.checkpoint is None:
            cfg = _resolve_config(req)
            out = run_raw_control(cfg, req.data_dir, req.seed, with_frame=req.with_frame)
            report = out["report"]
            frame = out.get("frame_privacy")
        else:
            params, meta = load_phase_state(req.checkpoint)
            cfg = _resolve_config(req, meta)
            settings = model_settings_from(cfg)
            trv, tra, trp = load_split(req.data_dir, "train")
            tev, tea, tep = load_split(req.data_dir, "test")
            aspec = recognizer_spec_from(cfg, "action", cfg["data"]["classes"])
            pspec = recognizer_spec_from(cfg, "video-privacy", cfg["data"]["privacy_attrs"])
            fspec = recognizer_spec_from(cfg, "frame-privacy", cfg["data"]["privacy_attrs"]) \
                if req.with_frame else None
            out = run_phase_eval(params, settings, trv, tra, trp, tev, tea, tep,
                                 aspec, pspec, phase_plan_from(cfg, "eval"),
                                 RngState(req.seed).child("phase_eval"), frame_spec=fspec,
                                 attribute_names=list(MARKER_NAMES), seed=req.seed,
                                 config_snapshot=cfg)
            report = out["report"]
            frame = out.get("frame_privacy")
        json_path = csv_path = None
        if req.out_dir is not None:
            jp, cp = write_report_files(req.out_dir, report)
            json_path, csv_path = str(jp), str(cp)
        return S.EvalResponse(report=S.ReportModel.from_report(report),
                              csv=report.to_csv(), frame_privacy=frame,
                              json_path=json_path, csv_path=csv_path)

    @app.post("/ablate", response_model=S.AblateResponse)
    def ablate(req: S.AblateRequest) -> S.AblateResponse:
        cfg = _resolve_config(req)
        rows = sweep(cfg, req.data_dir, req.sweep, seeds=req.seeds)
        text = sweep_csv(rows)
        csv_path = None
        if req.out_dir is not None:
            out = Path(req.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            path = out / f"sweep_{req.sweep}.csv"
            path.write_text(text)
            csv_path = str(path)
        return S.AblateResponse(axis=req.sweep, rows=rows, csv=text, csv_path=csv_path)

    @app.post("/grad-check", response_model=S.GradCheckResponse)
    def grad_check(req: S.GradCheckRequest) -> S.GradCheckResponse:
        start = time.perf_counter()
        entries = run_suite(instances=req.instances, dtype=np.dtype(req.dtype),
                            names=req.names, seed=req.seed)
        seconds = time.perf_counter() - start
        models = [S.GradCheckEntry(name=e.name, max_rel_err=float(e.max_rel_err),
                                   tol=float(e.tol), passed=bool(e.passed))
                  for e in entries]
        return S.GradCheckResponse(dtype=req.dtype, instances=req.instances,
                                   entries=models, all_passed=all(m.passed for m in models),
                                   seconds=seconds)

    return app
