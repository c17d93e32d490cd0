"""Request and response bodies for the HTTP service.

Everything crossing the wire is plain JSON; numpy arrays stay on the
server side.  Paths in requests are interpreted on the server's
filesystem, which for the bundled CLI is the same machine.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field

from ..metrics import MetricsReport

Phase = Literal["init", "adversarial", "eval", "all"]
Split = Literal["train", "test"]
SweepAxis = Literal["alpha", "dt", "lambda"]
DtypeName = Literal["float32", "float64"]


class HealthResponse(BaseModel):
    status: Literal["ok"] = "ok"
    package: str = "tubeveil"
    version: str


class ReportModel(BaseModel):
    """JSON mirror of a metrics report."""

    top1: float = Field(ge=0.0, le=100.0)
    cmap: float = Field(ge=0.0, le=100.0)
    f1: float = Field(ge=0.0, le=1.0)
    per_class_ap: list[float] = Field(default_factory=list)
    per_class_f1: list[float] = Field(default_factory=list)
    attribute_names: list[str] = Field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_report(cls, report: MetricsReport) -> "ReportModel":
        return cls(
            top1=report.top1,
            cmap=report.cmap,
            f1=report.f1,
            per_class_ap=list(report.per_class_ap),
            per_class_f1=list(report.per_class_f1),
            attribute_names=list(report.attribute_names),
            seed=report.seed,
        )


class ConfiguredRequest(BaseModel):
    """Base for endpoints that accept the layered JSON config."""

    config_path: str | None = None
    overrides: dict = Field(default_factory=dict)
    seed: int = 0


class GenDataRequest(ConfiguredRequest):
    out_dir: str


class GenDataResponse(BaseModel):
    manifest_path: str
    counts: dict[str, int]
    classes: int
    privacy_attrs: int
    shape: list[int]


class TrainRequest(ConfiguredRequest):
    phase: Phase
    data_dir: str
    out_dir: str | None = None
    resume: str | None = None
    with_frame: bool = True
    with_raw_control: bool = True


class TrainResponse(BaseModel):
    phase: Phase
    seed: int
    checkpoint: str | None = None
    history: dict[str, list[float]] = Field(default_factory=dict)
    report: ReportModel | None = None
    raw_report: ReportModel | None = None
    frame_privacy: dict[str, float] | None = None
    raw_frame_privacy: dict[str, float] | None = None
    retained_counts: list[int] | None = None
    report_csv: str | None = None


class TransformRequest(BaseModel):
    checkpoint: str
    data_dir: str
    out_dir: str
    split: Split = "test"
    limit: int | None = Field(default=None, ge=1)
    dump_frames: bool = False


class TransformResponse(BaseModel):
    out_dir: str
    clips: list[str]
    retained_counts: list[int]
    frames_dir: str | None = None


class EvalRequest(ConfiguredRequest):
    data_dir: str
    checkpoint: str | None = None
    out_dir: str | None = None
    with_frame: bool = False


class EvalResponse(BaseModel):
    report: ReportModel
    csv: str
    frame_privacy: dict[str, float] | None = None
    json_path: str | None = None
    csv_path: str | None = None


class AblateRequest(ConfiguredRequest):
    data_dir: str
    sweep: SweepAxis
    seeds: list[int] = Field(default_factory=lambda: [0])
    out_dir: str | None = None


class AblateResponse(BaseModel):
    axis: SweepAxis
    rows: list[dict]
    csv: str
    csv_path: str | None = None


class GradCheckRequest(BaseModel):
    instances: int = Field(default=20, ge=1)
    dtype: DtypeName = "float32"
    names: list[str] | None = None
    seed: int = 2024


class GradCheckEntry(BaseModel):
    name: str
    max_rel_err: float
    tol: float
    passed: bool


class GradCheckResponse(BaseModel):
    dtype: DtypeName
    instances: int
    entries: list[GradCheckEntry]
    all_passed: bool
    seconds: float
