"""Per-sample shift degrees against an ID corpus and grid division.

A test sample's semantic (covariate) shift degree is the k-th nearest-neighbor
cosine distance from its semantic (covariate) half to the ID corpus's
corresponding halves. Degrees are bucketed per axis into half-open intervals,
giving each sample a (semantic level, covariate level) grid cell.

The k-NN engine is exact blocked brute force: the ID halves are immutable
shared inputs, query blocks are independent, and results are gathered in
input order so output is deterministic regardless of batching.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .decomposition import DecompositionMatrix, decompose
from .errors import StoreIOError, ValidationError
from .store import EmbeddingStore

DEFAULT_K = 10
DEFAULT_LEVELS = 8
DEFAULT_NA_THRESHOLD = 100
DEGREE_MIN, DEGREE_MAX = 0.0, 2.0


@dataclass
class ShiftDegrees:
    """Semantic/covariate shift degree per test id."""

    ids: list[str]
    d_sem: np.ndarray
    d_cov: np.ndarray
    k_used: int
    w_fingerprint: str = ""

    def validate(self) -> None:
        n = len(self.ids)
        if self.d_sem.shape != (n,) or self.d_cov.shape != (n,):
            raise ValidationError("degree arrays must have one entry per id")
        for name, arr in (("d_sem", self.d_sem), ("d_cov", self.d_cov)):
            if np.any(~np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
            if arr.size and (arr.min() < DEGREE_MIN - 1e-9 or arr.max() > DEGREE_MAX + 1e-9):
                raise ValidationError(f"{name} outside the cosine-distance range [0, 2]")


@dataclass
class IntervalSet:
    """Per-axis contiguous half-open intervals covering [0, 2].

    ``sem_edges``/``cov_edges`` hold n_levels + 1 boundaries; interval i
    (1-based level) is [edges[i-1], edges[i]), with the outermost intervals
    clamped to the full degree range.
    """

    sem_edges: np.ndarray
    cov_edges: np.ndarray

    @property
    def n_levels(self) -> int:
        return len(self.sem_edges) - 1

    def intervals(self, axis: str) -> list[tuple[float, float]]:
        edges = self.sem_edges if axis == "semantic" else self.cov_edges
        return [(float(edges[i]), float(edges[i + 1])) for i in range(len(edges) - 1)]

    def validate(self) -> None:
        for name, edges in (("sem", self.sem_edges), ("cov", self.cov_edges)):
            if len(edges) != len(self.sem_edges):
                raise ValidationError("axes must have the same number of intervals")
            if len(edges) < 3:
                raise ValidationError(f"{name}_edges must define at least 2 intervals")
            if np.any(np.diff(edges) <= 0):
                raise ValidationError(f"{name}_edges must be strictly increasing")

    def assign(self, degrees: np.ndarray, axis: str) -> np.ndarray:
        """1-based level per degree. Interior boundaries are half-open
        [start, end); the first and last intervals absorb anything beyond
        the clamped range so every degree lands somewhere."""
        edges = self.sem_edges if axis == "semantic" else self.cov_edges
        return np.searchsorted(edges[1:-1], degrees, side="right") + 1


@dataclass
class SubsetAssignment:
    id: str
    level_sem: int
    level_cov: int


@dataclass
class SubsetIndex:
    """Partition of the test ids into (semantic level, covariate level) cells."""

    intervals: IntervalSet
    grid: dict[tuple[int, int], list[str]]
    na_mask: np.ndarray  # (n_levels, n_levels) bool, True when too small to evaluate
    na_threshold: int

    @property
    def n_levels(self) -> int:
        return self.intervals.n_levels

    def cell(self, level_sem: int, level_cov: int) -> list[str]:
        return self.grid.get((level_sem, level_cov), [])

    def counts(self) -> np.ndarray:
        n = self.n_levels
        out = np.zeros((n, n), dtype=np.int64)
        for (ls, lc), ids in self.grid.items():
            out[ls - 1, lc - 1] = len(ids)
        return out


def kth_nn_distance(query: np.ndarray, base: np.ndarray, k: int = DEFAULT_K) -> float:
    """Exact k-th smallest cosine distance from ``query`` to the rows of ``base``."""
    query = np.asarray(query, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 2 or query.shape != (base.shape[1],):
        raise ValidationError(
            f"query shape {query.shape} incompatible with base {base.shape}"
        )
    if not (1 <= k <= base.shape[0]):
        raise ValidationError(f"k={k} outside 1..{base.shape[0]}")
    return float(kth_nn_distances(query[None, :], base, k)[0])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValidationError("cosine distance undefined for a zero vector")
    return x / norms


def kth_nn_distances(
    queries: np.ndarray,
    base: np.ndarray,
    k: int,
    query_block: int = 1024,
    base_block: int = 65536,
) -> np.ndarray:
    """Exact k-th nearest cosine distance for every query row.

    Blocked brute force: queries are processed in blocks, the base in chunks,
    keeping the running k smallest candidates per query, so memory stays at
    O(query_block * (base_block + k)) regardless of corpus size.
    """
    queries = np.asarray(queries, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if queries.ndim != 2 or base.ndim != 2 or queries.shape[1] != base.shape[1]:
        raise ValidationError(
            f"queries {queries.shape} and base {base.shape} must share their dimension"
        )
    n_base = base.shape[0]
    if not (1 <= k <= n_base):
        raise ValidationError(f"k={k} outside 1..{n_base}")

    base_n = _unit_rows(base)
    out = np.empty(queries.shape[0], dtype=np.float64)
    for qs in range(0, queries.shape[0], query_block):
        q = _unit_rows(queries[qs : qs + query_block])
        best: Optional[np.ndarray] = None  # (rows, <=k) current smallest distances
        for bs in range(0, n_base, base_block):
            d = 1.0 - q @ base_n[bs : bs + base_block].T
            if d.shape[1] > k:
                d = np.partition(d, k - 1, axis=1)[:, :k]
            if best is None:
                best = d
            else:
                merged = np.concatenate([best, d], axis=1)
                if merged.shape[1] > k:
                    merged = np.partition(merged, k - 1, axis=1)[:, :k]
                best = merged
        assert best is not None
        out[qs : qs + q.shape[0]] = np.partition(best, k - 1, axis=1)[:, k - 1]
    return out


def measure_shifts(
    test: EmbeddingStore,
    id_store: EmbeddingStore,
    dm: DecompositionMatrix,
    k: int = DEFAULT_K,
) -> ShiftDegrees:
    """Decompose both corpora once, then take per-sample k-th nearest cosine
    distances on the semantic and covariate halves independently."""
    if id_store.count == 0:
        raise ValidationError("ID store is empty")
    if test.dim != id_store.dim:
        raise ValidationError(
            f"dimension mismatch: test dim {test.dim}, ID dim {id_store.dim}"
        )
    if test.dim != dm.l:
        raise ValidationError(f"store dim {test.dim} != transform size {dm.l}")
    if not (1 <= k <= id_store.count):
        raise ValidationError(f"k={k} outside 1..{id_store.count}")

    id_sem, id_cov = decompose(id_store.vectors.astype(np.float64), dm)
    test_sem, test_cov = decompose(test.vectors.astype(np.float64), dm)

    degrees = ShiftDegrees(
        ids=list(test.ids),
        d_sem=kth_nn_distances(test_sem, id_sem, k),
        d_cov=kth_nn_distances(test_cov, id_cov, k),
        k_used=k,
        w_fingerprint=dm.fingerprint(),
    )
    degrees.validate()
    return degrees


def write_degrees(degrees: ShiftDegrees, path: str | os.PathLike) -> None:
    degrees.validate()
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        header = {"k_used": degrees.k_used, "W_fingerprint": degrees.w_fingerprint}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for i, sample_id in enumerate(degrees.ids):
            f.write(
                json.dumps(
                    {
                        "id": sample_id,
                        "d_sem": float(degrees.d_sem[i]),
                        "d_cov": float(degrees.d_cov[i]),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_degrees(path: str | os.PathLike) -> ShiftDegrees:
    path = Path(path)
    if not path.exists():
        raise StoreIOError(f"no such degrees file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or "k_used" not in lines[0]:
        raise StoreIOError(f"{path}: missing header line with k_used")
    header, rows = lines[0], lines[1:]
    degrees = ShiftDegrees(
        ids=[r["id"] for r in rows],
        d_sem=np.array([r["d_sem"] for r in rows], dtype=np.float64),
        d_cov=np.array([r["d_cov"] for r in rows], dtype=np.float64),
        k_used=int(header["k_used"]),
        w_fingerprint=header.get("W_fingerprint", ""),
    )
    degrees.validate()
    return degrees


def derive_intervals(
    degrees: ShiftDegrees,
    n_levels: int = DEFAULT_LEVELS,
    policy: str = "uniform_clipped",
) -> IntervalSet:
    """Equal-width bins per axis between the 1st and 99th percentile of that
    axis's degrees, with the outermost bins stretched to cover [0, 2] so a
    stray outlier cannot collapse the interior resolution."""
    if policy != "uniform_clipped":
        raise ValidationError(f"unknown interval policy {policy!r}")
    if n_levels < 2:
        raise ValidationError(f"n_levels must be >= 2, got {n_levels}")
    if not degrees.ids:
        raise ValidationError("cannot derive intervals from empty degrees")

    def axis_edges(values: np.ndarray, axis: str) -> np.ndarray:
        lo, hi = np.percentile(values, [1.0, 99.0])
        if hi <= lo:
            raise ValidationError(
                f"{axis} degrees are (nearly) constant; check the inputs"
            )
        edges = np.linspace(lo, hi, n_levels + 1)
        edges[0] = DEGREE_MIN
        edges[-1] = DEGREE_MAX
        if np.any(np.diff(edges) <= 0):
            raise ValidationError(
                f"{axis} degree distribution too concentrated near the range edge"
            )
        return edges

    intervals = IntervalSet(
        sem_edges=axis_edges(degrees.d_sem, "semantic"),
        cov_edges=axis_edges(degrees.d_cov, "covariate"),
    )
    intervals.validate()
    return intervals


def divide_dataset(
    test: Optional[EmbeddingStore],
    degrees: ShiftDegrees,
    intervals: IntervalSet,
    na_threshold: int = DEFAULT_NA_THRESHOLD,
) -> SubsetIndex:
    """Assign every test id to its (semantic, covariate) level cell.

    The output is a disjoint, exhaustive partition; cells with fewer than
    ``na_threshold`` samples are flagged in the N/A mask. ``test`` fixes the
    id universe and ordering; pass None to divide exactly the measured ids.
    """
    test_ids = degrees.ids if test is None else test.ids
    degree_pos = {sample_id: i for i, sample_id in enumerate(degrees.ids)}
    missing = [sample_id for sample_id in test_ids if sample_id not in degree_pos]
    if missing:
        raise ValidationError(f"degrees missing for test id {missing[0]!r}")

    order = np.array([degree_pos[sample_id] for sample_id in test_ids], dtype=np.int64)
    levels_sem = intervals.assign(degrees.d_sem[order], "semantic")
    levels_cov = intervals.assign(degrees.d_cov[order], "covariate")

    n = intervals.n_levels
    if levels_sem.min() < 1 or levels_sem.max() > n or levels_cov.min() < 1 or levels_cov.max() > n:
        raise ValidationError("internal consistency: degree fell outside all intervals")

    grid: dict[tuple[int, int], list[str]] = {}
    for i, sample_id in enumerate(test_ids):
        grid.setdefault((int(levels_sem[i]), int(levels_cov[i])), []).append(sample_id)

    na_mask = np.ones((n, n), dtype=bool)
    for (ls, lc), ids in grid.items():
        na_mask[ls - 1, lc - 1] = len(ids) < na_threshold
    return SubsetIndex(intervals=intervals, grid=grid, na_mask=na_mask, na_threshold=na_threshold)


def write_index(index: SubsetIndex, path: str | os.PathLike) -> None:
    n = index.n_levels
    cells = []
    for ls in range(1, n + 1):
        for lc in range(1, n + 1):
            ids = index.cell(ls, lc)
            cells.append(
                {
                    "level_sem": ls,
                    "level_cov": lc,
                    "na": bool(index.na_mask[ls - 1, lc - 1]),
                    "ids": ids,
                }
            )
    doc = {
        "n_levels": n,
        "na_threshold": index.na_threshold,
        "sem_edges": [float(e) for e in index.intervals.sem_edges],
        "cov_edges": [float(e) for e in index.intervals.cov_edges],
        "cells": cells,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def read_index(path: str | os.PathLike) -> SubsetIndex:
    path = Path(path)
    if not path.exists():
        raise StoreIOError(f"no such subset index: {path}")
    doc = json.loads(path.read_text())
    intervals = IntervalSet(
        sem_edges=np.array(doc["sem_edges"], dtype=np.float64),
        cov_edges=np.array(doc["cov_edges"], dtype=np.float64),
    )
    intervals.validate()
    n = doc["n_levels"]
    grid: dict[tuple[int, int], list[str]] = {}
    na_mask = np.ones((n, n), dtype=bool)
    for cell in doc["cells"]:
        ls, lc = int(cell["level_sem"]), int(cell["level_cov"])
        if cell["ids"]:
            grid[(ls, lc)] = list(cell["ids"])
        na_mask[ls - 1, lc - 1] = bool(cell["na"])
    return SubsetIndex(
        intervals=intervals,
        grid=grid,
        na_mask=na_mask,
        na_threshold=int(doc["na_threshold"]),
    )
