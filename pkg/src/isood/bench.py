"""End-to-end evaluation: score every (subset, scorer) pair against the shared
ID scores, compute the metric grids, axis curves, and trend tables, and emit
CSV/JSON reports.

Metric values are stored in percent (0-100). Curves are unweighted means over
the non-N/A cells at each level; the subset-count grid is emitted alongside so
readers can judge the size effects themselves. Cell evaluations are
independent and could run in parallel; report assembly is a single-threaded
reduction in fixed order, so identical configs produce byte-identical output.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics as M
from .errors import StoreIOError, ValidationError
from .scorers import score_outputs
from .shift import read_index
from .store import ClassifierOutputs, read_outputs

METRIC_NAMES = ("fpr95", "auroc", "aupr")
AXES = ("semantic", "covariate")


@dataclass
class ScorerSpec:
    name: str
    params: dict = field(default_factory=dict)
    alias: Optional[str] = None

    @property
    def key(self) -> str:
        return self.alias or self.name


@dataclass
class BenchmarkConfig:
    id_outputs: str
    test_outputs: str
    subset_index: str
    out_dir: str
    scorers: list[ScorerSpec]
    metrics: list[str] = field(default_factory=lambda: list(METRIC_NAMES))
    fit_outputs: Optional[str] = None
    na_threshold: Optional[int] = None
    seed: int = 0

    def validate(self) -> None:
        if not self.scorers:
            raise ValidationError("config lists no scorers")
        keys = [s.key for s in self.scorers]
        if len(set(keys)) != len(keys):
            raise ValidationError("duplicate scorer keys; use 'alias' to disambiguate")
        for m in self.metrics:
            if m not in METRIC_NAMES:
                raise ValidationError(f"unknown metric {m!r}; known: {', '.join(METRIC_NAMES)}")

    @classmethod
    def from_dict(cls, obj: dict, base_dir: Optional[Path] = None) -> "BenchmarkConfig":
        def resolve(p: Optional[str]) -> Optional[str]:
            if p is None:
                return None
            path = Path(p)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return str(path)

        scorers = []
        for entry in obj["scorers"]:
            if isinstance(entry, str):
                scorers.append(ScorerSpec(name=entry))
            else:
                scorers.append(
                    ScorerSpec(
                        name=entry["name"],
                        params=dict(entry.get("params", {})),
                        alias=entry.get("alias"),
                    )
                )
        config = cls(
            id_outputs=resolve(obj["id_outputs"]),
            test_outputs=resolve(obj["test_outputs"]),
            subset_index=resolve(obj["subset_index"]),
            out_dir=resolve(obj["out_dir"]),
            scorers=scorers,
            metrics=list(obj.get("metrics", METRIC_NAMES)),
            fit_outputs=resolve(obj.get("fit_outputs")),
            na_threshold=obj.get("na_threshold"),
            seed=int(obj.get("seed", 0)),
        )
        config.validate()
        return config

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "BenchmarkConfig":
        path = Path(path)
        if not path.exists():
            raise StoreIOError(f"no such config: {path}")
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "id_outputs": self.id_outputs,
            "test_outputs": self.test_outputs,
            "subset_index": self.subset_index,
            "out_dir": self.out_dir,
            "scorers": [
                {"name": s.name, "params": s.params, "alias": s.key} for s in self.scorers
            ],
            "metrics": list(self.metrics),
            "fit_outputs": self.fit_outputs,
            "na_threshold": self.na_threshold,
            "seed": self.seed,
        }


@dataclass
class EvaluationReport:
    """Grids, curves, and trend tables for one benchmark run.

    All payload values are JSON-native (lists, dicts, floats, None for N/A)
    so the summary file round-trips losslessly.
    """

    n_levels: int
    scorer_keys: list[str]
    metric_names: list[str]
    counts: list[list[int]]
    id_count: int
    na_mask: list[list[bool]]
    grids: dict  # scorer -> metric -> n x n nested lists, None = N/A
    curves: dict  # metric -> axis -> scorer -> per-level list, None = N/A
    trends: dict  # scorer -> axis -> metric -> {correlation, degenerate, sensitivity}
    conventions: dict
    config: dict
    score_calls: dict

    def to_dict(self) -> dict:
        return {
            "n_levels": self.n_levels,
            "scorers": self.scorer_keys,
            "metrics": self.metric_names,
            "counts": self.counts,
            "id_count": self.id_count,
            "na_mask": self.na_mask,
            "grids": self.grids,
            "curves": self.curves,
            "trends": self.trends,
            "conventions": self.conventions,
            "config": self.config,
            "score_calls": self.score_calls,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvaluationReport":
        return cls(
            n_levels=obj["n_levels"],
            scorer_keys=list(obj["scorers"]),
            metric_names=list(obj["metrics"]),
            counts=obj["counts"],
            id_count=obj["id_count"],
            na_mask=obj["na_mask"],
            grids=obj["grids"],
            curves=obj["curves"],
            trends=obj["trends"],
            conventions=obj["conventions"],
            config=obj["config"],
            score_calls=obj["score_calls"],
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EvaluationReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _metric_value(name: str, id_scores: np.ndarray, cell_scores: np.ndarray) -> float:
    if name == "fpr95":
        return 100.0 * M.fpr_at_tpr(id_scores, cell_scores, 0.95)
    if name == "auroc":
        return 100.0 * M.auroc(id_scores, cell_scores)
    if name == "aupr":
        return 100.0 * M.aupr(id_scores, cell_scores)
    raise ValidationError(f"unknown metric {name!r}")


def _select_rows(outputs: ClassifierOutputs, ids: list[str], row_of: dict[str, int],
                 cell: tuple[int, int]) -> ClassifierOutputs:
    missing = [i for i in ids if i not in row_of]
    if missing:
        raise ValidationError(
            f"cell {cell}: test outputs have no row for id {missing[0]!r}"
        )
    rows = np.array([row_of[i] for i in ids], dtype=np.int64)
    return ClassifierOutputs(
        ids=list(ids),
        features=outputs.features[rows],
        logits=outputs.logits[rows],
        fc_weights=outputs.fc_weights,
        fc_bias=outputs.fc_bias,
        label_ids=[outputs.label_ids[r] for r in rows] if outputs.label_ids else [],
        model_name=outputs.model_name,
    )


def run_benchmark(config: BenchmarkConfig) -> EvaluationReport:
    """Score the ID set once per scorer, score every non-N/A subset once per
    scorer, and assemble metric grids, per-axis curves, and trend tables."""
    config.validate()
    id_outputs = read_outputs(config.id_outputs)
    test_outputs = read_outputs(config.test_outputs)
    fit_outputs = read_outputs(config.fit_outputs) if config.fit_outputs else id_outputs
    index = read_index(config.subset_index)

    na_threshold = index.na_threshold
    na_mask = index.na_mask.copy()
    if config.na_threshold is not None:
        na_threshold = config.na_threshold
        na_mask = index.counts() < na_threshold

    n = index.n_levels
    row_of = {sample_id: i for i, sample_id in enumerate(test_outputs.ids)}
    counts = index.counts()

    grids: dict = {}
    score_calls: dict = {}
    for spec in config.scorers:
        rankfeat_params = {"seed": config.seed, **spec.params}
        params = rankfeat_params if spec.name == "rankfeat" else spec.params
        id_sv = score_outputs(id_outputs, spec.name, params, fit_outputs)
        calls = {"id": 1, "cells": 0}
        grid = {m: [[None] * n for _ in range(n)] for m in config.metrics}
        for ls in range(1, n + 1):
            for lc in range(1, n + 1):
                if na_mask[ls - 1, lc - 1]:
                    continue
                cell_ids = index.cell(ls, lc)
                if not cell_ids:
                    raise ValidationError(
                        f"cell ({ls},{lc}) is below the N/A threshold mask but empty"
                    )
                subset = _select_rows(test_outputs, cell_ids, row_of, (ls, lc))
                cell_sv = score_outputs(subset, spec.name, params, fit_outputs)
                calls["cells"] += 1
                for m in config.metrics:
                    grid[m][ls - 1][lc - 1] = _metric_value(m, id_sv.scores, cell_sv.scores)
        grids[spec.key] = grid
        score_calls[spec.key] = calls

    curves: dict = {m: {axis: {} for axis in AXES} for m in config.metrics}
    for m in config.metrics:
        for spec in config.scorers:
            grid = grids[spec.key][m]
            sem_curve, cov_curve = [], []
            for i in range(n):
                row_vals = [grid[i][j] for j in range(n) if grid[i][j] is not None]
                sem_curve.append(float(np.mean(row_vals)) if row_vals else None)
                col_vals = [grid[j][i] for j in range(n) if grid[j][i] is not None]
                cov_curve.append(float(np.mean(col_vals)) if col_vals else None)
            curves[m]["semantic"][spec.key] = sem_curve
            curves[m]["covariate"][spec.key] = cov_curve

    trends: dict = {}
    for spec in config.scorers:
        trends[spec.key] = {}
        for axis in AXES:
            trends[spec.key][axis] = {}
            for m in config.metrics:
                curve = curves[m][axis][spec.key]
                retained = [(i + 1, v) for i, v in enumerate(curve) if v is not None]
                if len(retained) < 2:
                    entry = {"correlation": 0.0, "degenerate": True, "sensitivity": 0.0}
                else:
                    levels = np.array([lvl for lvl, _ in retained], dtype=np.float64)
                    values = np.array([v for _, v in retained], dtype=np.float64)
                    series = M.LevelSeries(x=values, axis=axis, levels=levels)
                    corr = M.level_correlation(series)
                    entry = {
                        "correlation": corr.value,
                        "degenerate": corr.degenerate,
                        "sensitivity": M.level_sensitivity(series),
                    }
                trends[spec.key][axis][m] = entry

    materialized = config.to_dict()
    materialized["na_threshold"] = na_threshold
    return EvaluationReport(
        n_levels=n,
        scorer_keys=[s.key for s in config.scorers],
        metric_names=list(config.metrics),
        counts=[[int(c) for c in row] for row in counts],
        id_count=id_outputs.n,
        na_mask=[[bool(v) for v in row] for row in na_mask],
        grids=grids,
        curves=curves,
        trends=trends,
        conventions={
            "values": "percent",
            "aupr_positive_class": "id",
            "auroc_ties": "half_credit",
            "fpr_ties": "counted_positive",
            "curve_weighting": "unweighted_mean_over_cells",
        },
        config=materialized,
        score_calls=score_calls,
    )


def _fmt(v: Optional[float]) -> str:
    return "N/A" if v is None else f"{v:.4f}"


def emit_report(report: EvaluationReport, out_dir: str | os.PathLike) -> list[str]:
    """Write summary.json plus the CSV grids, curves, trend tables, and the
    subset-count grid. Returns the written file names."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StoreIOError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = []
    n = report.n_levels

    def emit(name: str, text: str) -> None:
        (out_dir / name).write_text(text)
        written.append(name)

    emit("summary.json", json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")

    header = "sem\\cov," + ",".join(str(j) for j in range(1, n + 1)) + "\n"
    lines = [header]
    for i in range(n):
        lines.append(f"{i + 1}," + ",".join(str(c) for c in report.counts[i]) + "\n")
    emit("subset_counts.csv", "".join(lines))

    for scorer in report.scorer_keys:
        for m in report.metric_names:
            grid = report.grids[scorer][m]
            lines = [header]
            for i in range(n):
                lines.append(f"{i + 1}," + ",".join(_fmt(v) for v in grid[i]) + "\n")
            emit(f"grid_{scorer}_{m}.csv", "".join(lines))

    for m in report.metric_names:
        for axis in AXES:
            lines = ["level," + ",".join(report.scorer_keys) + "\n"]
            for i in range(n):
                row = [str(i + 1)]
                for scorer in report.scorer_keys:
                    row.append(_fmt(report.curves[m][axis][scorer][i]))
                lines.append(",".join(row) + "\n")
            emit(f"curve_{m}_{axis}.csv", "".join(lines))

    for m in report.metric_names:
        lines = [
            "scorer,semantic_correlation,semantic_sensitivity,"
            "covariate_correlation,covariate_sensitivity\n"
        ]
        for scorer in report.scorer_keys:
            sem = report.trends[scorer]["semantic"][m]
            cov = report.trends[scorer]["covariate"][m]
            lines.append(
                f"{scorer},{sem['correlation']:.4f},{sem['sensitivity']:.4f},"
                f"{cov['correlation']:.4f},{cov['sensitivity']:.4f}\n"
            )
        emit(f"trends_{m}.csv", "".join(lines))
    return written


def load_report(summary_path: str | os.PathLike) -> EvaluationReport:
    summary_path = Path(summary_path)
    if summary_path.is_dir():
        summary_path = summary_path / "summary.json"
    if not summary_path.exists():
        raise StoreIOError(f"no such summary: {summary_path}")
    return EvaluationReport.from_dict(json.loads(summary_path.read_text()))
