"""FastAPI service wrapping the benchmark toolkit.

Every endpoint is a thin adapter: decode the request, call the core package
on host-local files, return a summary. Errors map onto one of three kinds --
validation, io, numerical -- which clients (the bundled CLI in particular)
translate into exit codes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from .. import bench, decomposition, prompts, scorers, shift, store
from ..errors import NumericalError, StoreIOError, ValidationError
from . import schemas as S

_STATUS = {"validation": 400, "io": 404, "numerical": 500}


def _error_response(kind: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=_STATUS.get(kind, 500),
        content={"error": {"kind": kind, "message": message}},
    )


def create_app() -> FastAPI:
    app = FastAPI(title="isood", version=__version__)

    @app.exception_handler(ValidationError)
    async def _validation(request: Request, exc: ValidationError) -> JSONResponse:
        return _error_response("validation", str(exc))

    @app.exception_handler(StoreIOError)
    async def _store_io(request: Request, exc: StoreIOError) -> JSONResponse:
        return _error_response("io", str(exc))

    @app.exception_handler(NumericalError)
    async def _numerical(request: Request, exc: NumericalError) -> JSONResponse:
        return _error_response("numerical", str(exc))

    @app.exception_handler(OSError)
    async def _os_error(request: Request, exc: OSError) -> JSONResponse:
        return _error_response("io", str(exc))

    @app.get("/healthz", response_model=S.HealthResponse)
    def healthz() -> S.HealthResponse:
        return S.HealthResponse(status="ok", version=__version__)

    @app.post("/v1/train-laid", response_model=S.TrainLaidResponse)
    def train_laid(req: S.TrainLaidRequest) -> S.TrainLaidResponse:
        spec = decomposition.TripletCorpusSpec.from_json(req.corpus_spec)
        text_features = store.read_store(req.text_features)
        corpus = decomposition.build_triplet_corpus(spec, text_features)
        config = decomposition.TrainConfig(
            alpha=req.alpha,
            learning_rate=req.learning_rate,
            epochs=req.epochs,
            batch_size=req.batch_size,
            seed=req.seed,
            orth_weight=req.orth_weight,
        )
        dm = decomposition.train_decomposition(corpus, config)
        decomposition.write_matrix(dm, req.out)
        return S.TrainLaidResponse(
            out=req.out,
            l=dm.l,
            orth_residual=dm.train_manifest["orth_residual"],
            final_losses=dm.train_manifest["final_losses"],
            fingerprint=dm.fingerprint(),
        )

    @app.post("/v1/measure", response_model=S.MeasureResponse)
    def measure(req: S.MeasureRequest) -> S.MeasureResponse:
        test = store.read_store(req.test)
        id_store = store.read_store(req.id)
        dm = decomposition.read_matrix(req.w)
        degrees = shift.measure_shifts(test, id_store, dm, req.k)
        shift.write_degrees(degrees, req.out)
        return S.MeasureResponse(
            out=req.out,
            count=len(degrees.ids),
            k_used=degrees.k_used,
            w_fingerprint=degrees.w_fingerprint,
        )

    @app.post("/v1/divide", response_model=S.DivideResponse)
    def divide(req: S.DivideRequest) -> S.DivideResponse:
        degrees = shift.read_degrees(req.degrees)
        test = store.read_store(req.test) if req.test else None
        intervals = shift.derive_intervals(degrees, req.levels)
        index = shift.divide_dataset(test, degrees, intervals, req.na_threshold)
        shift.write_index(index, req.out)
        counts = index.counts()
        return S.DivideResponse(
            out=req.out,
            n_levels=index.n_levels,
            total=int(counts.sum()),
            na_cells=int(index.na_mask.sum()),
            nonempty_cells=int((counts > 0).sum()),
        )

    @app.post("/v1/score", response_model=S.ScoreResponse)
    def score(req: S.ScoreRequest) -> S.ScoreResponse:
        outputs = store.read_outputs(req.outputs)
        fit = store.read_outputs(req.fit_outputs) if req.fit_outputs else None
        sv = scorers.score_outputs(outputs, req.method, req.params, fit)
        scorers.write_scores(sv, req.out)
        return S.ScoreResponse(out=req.out, scorer=sv.scorer_name, count=len(sv.ids), params=sv.params)

    @app.post("/v1/eval", response_model=S.EvalResponse)
    def evaluate(req: S.EvalRequest) -> S.EvalResponse:
        if (req.config_path is None) == (req.config is None):
            raise ValidationError("provide exactly one of config_path or config")
        if req.config_path is not None:
            config = bench.BenchmarkConfig.from_json(req.config_path)
        else:
            config = bench.BenchmarkConfig.from_dict(req.config)
        report = bench.run_benchmark(config)
        files = bench.emit_report(report, config.out_dir)
        return S.EvalResponse(
            out_dir=config.out_dir,
            files=files,
            n_levels=report.n_levels,
            scorers=report.scorer_keys,
        )

    @app.post("/v1/synis/render", response_model=S.SynisRenderResponse)
    def synis_render(req: S.SynisRenderRequest) -> S.SynisRenderResponse:
        if (req.labels is None) == (req.labels_path is None):
            raise ValidationError("provide exactly one of labels or labels_path")
        labels = req.labels
        if labels is None:
            labels_file = Path(req.labels_path)
            if not labels_file.exists():
                raise StoreIOError(f"no such labels file: {labels_file}")
            labels = [line.strip() for line in labels_file.read_text().splitlines() if line.strip()]
        styles = prompts.load_styles(req.styles_path)
        records = prompts.render_prompts(styles, labels)
        warnings = prompts.validate_prompt_records(records)
        prompts.write_prompts(records, req.out)
        return S.SynisRenderResponse(
            out=req.out,
            count=len(records),
            n_styles=len(styles),
            n_labels=len(labels),
            warnings=warnings,
        )

    @app.post("/v1/synis/manifest", response_model=S.SynisManifestResponse)
    def synis_manifest(req: S.SynisManifestRequest) -> S.SynisManifestResponse:
        index = shift.read_index(req.index)
        records = prompts.read_prompts(req.prompts)
        manifest = prompts.export_generation_manifest(
            index,
            records,
            per_subset_target=req.per_subset_target,
            banned_terms=req.banned_terms
            if req.banned_terms is not None
            else prompts.DEFAULT_BANNED_TERMS,
            seed=req.seed,
        )
        prompts.write_generation_manifest(manifest, req.out)
        na_cells = sum(1 for c in manifest["cells"] if c["target"] == 0)
        return S.SynisManifestResponse(
            out=req.out,
            cells=len(manifest["cells"]),
            na_cells=na_cells,
            filtered=len(manifest["filter_report"]),
        )

    @app.post("/v1/report", response_model=S.ReportResponse)
    def report(req: S.ReportRequest) -> S.ReportResponse:
        loaded = bench.load_report(req.summary)
        files = bench.emit_report(loaded, req.out_dir)
        return S.ReportResponse(out_dir=req.out_dir, files=files)

    @app.post("/v1/validate", response_model=S.ValidateResponse)
    def validate(req: S.ValidateRequest) -> S.ValidateResponse:
        return _validate_path(req.path, req.kind)

    return app


def _guess_kind(path: Path) -> str:
    if path.is_dir():
        return "outputs"
    name = path.name
    if name.endswith(".iseb"):
        return "store"
    if name.endswith((".isw", ".isw1")) or name.endswith(".w"):
        return "matrix"
    if name.endswith(".jsonl"):
        return "degrees"
    if name.endswith(".json"):
        return "index"
    raise ValidationError(f"cannot guess validation kind for {path}; pass kind explicitly")


def _validate_path(path_str: str, kind: str) -> S.ValidateResponse:
    path = Path(path_str)
    if kind == "auto":
        kind = _guess_kind(path)
    detail: dict = {}
    if kind == "store":
        st = store.read_store(path)
        norms = np.linalg.norm(st.vectors.astype(np.float64), axis=1)
        detail = {
            "dim": st.dim,
            "count": st.count,
            "unit_norm_fraction": float(np.mean(np.abs(norms - 1.0) <= 1e-5)) if st.count else 1.0,
            "min_norm": float(norms.min()) if st.count else None,
            "max_norm": float(norms.max()) if st.count else None,
        }
    elif kind == "outputs":
        outputs = store.read_outputs(path)
        recomputed = outputs.features @ outputs.fc_weights.T + outputs.fc_bias
        detail = {
            "count": outputs.n,
            "d": outputs.d,
            "C": outputs.n_classes,
            "model_name": outputs.model_name,
            "logits_consistency_max_abs_err": float(np.max(np.abs(recomputed - outputs.logits)))
            if outputs.n
            else 0.0,
            "features_nonnegative": bool(np.all(outputs.features >= 0)),
        }
    elif kind == "matrix":
        dm = decomposition.read_matrix(path)
        detail = {
            "l": dm.l,
            "trained": dm.trained,
            "orth_residual": float(
                np.linalg.norm(dm.W.astype(np.float64).T @ dm.W.astype(np.float64) - np.eye(dm.l))
            ),
            "fingerprint": dm.fingerprint(),
        }
    elif kind == "degrees":
        degrees = shift.read_degrees(path)
        detail = {"count": len(degrees.ids), "k_used": degrees.k_used}
    elif kind == "index":
        index = shift.read_index(path)
        detail = {
            "n_levels": index.n_levels,
            "total": int(index.counts().sum()),
            "na_cells": int(index.na_mask.sum()),
        }
    elif kind == "scores":
        sv = scorers.read_scores(path)
        detail = {"scorer": sv.scorer_name, "count": len(sv.ids)}
    else:
        raise ValidationError(f"unknown validation kind {kind!r}")
    return S.ValidateResponse(path=str(path), kind=kind, ok=True, detail=detail)


app = create_app()
