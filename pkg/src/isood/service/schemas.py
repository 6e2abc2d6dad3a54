"""Request/response models for the benchmark service.

All payloads reference files on the service host's filesystem; the numeric
corpora never travel over the wire.
"""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorBody(BaseModel):
    kind: str  # validation | io | numerical | internal
    message: str


class ErrorResponse(BaseModel):
    error: ErrorBody


class TrainLaidRequest(BaseModel):
    text_features: str
    corpus_spec: str
    out: str
    alpha: float = 0.2
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 256
    seed: int = 0
    orth_weight: float = 1.0


class TrainLaidResponse(BaseModel):
    out: str
    l: int
    orth_residual: float
    final_losses: dict[str, float]
    fingerprint: str


class MeasureRequest(BaseModel):
    test: str
    id: str
    w: str
    k: int = 10
    out: str


class MeasureResponse(BaseModel):
    out: str
    count: int
    k_used: int
    w_fingerprint: str


class DivideRequest(BaseModel):
    degrees: str
    levels: int = 8
    na_threshold: int = 100
    out: str
    test: Optional[str] = None


class DivideResponse(BaseModel):
    out: str
    n_levels: int
    total: int
    na_cells: int
    nonempty_cells: int


class ScoreRequest(BaseModel):
    outputs: str
    method: str
    out: str
    params: dict[str, Any] = Field(default_factory=dict)
    fit_outputs: Optional[str] = None


class ScoreResponse(BaseModel):
    out: str
    scorer: str
    count: int
    params: dict[str, Any]


class EvalRequest(BaseModel):
    config_path: Optional[str] = None
    config: Optional[dict[str, Any]] = None


class EvalResponse(BaseModel):
    out_dir: str
    files: list[str]
    n_levels: int
    scorers: list[str]


class SynisRenderRequest(BaseModel):
    labels: Optional[list[str]] = None
    labels_path: Optional[str] = None
    styles_path: Optional[str] = None
    out: str


class SynisRenderResponse(BaseModel):
    out: str
    count: int
    n_styles: int
    n_labels: int
    warnings: list[str]


class SynisManifestRequest(BaseModel):
    index: str
    prompts: str
    out: str
    per_subset_target: int = 5000
    seed: int = 0
    banned_terms: Optional[list[str]] = None


class SynisManifestResponse(BaseModel):
    out: str
    cells: int
    na_cells: int
    filtered: int


class ReportRequest(BaseModel):
    summary: str
    out_dir: str


class ReportResponse(BaseModel):
    out_dir: str
    files: list[str]


class ValidateRequest(BaseModel):
    path: str
    kind: str = "auto"  # auto | store | outputs | matrix | degrees | index | scores


class ValidateResponse(BaseModel):
    path: str
    kind: str
    ok: bool
    detail: dict[str, Any]
