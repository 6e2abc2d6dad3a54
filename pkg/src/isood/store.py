"""Embedding corpora and classifier-output bundles with bit-exact binary formats.

``.iseb`` layout: a 16-byte header -- magic ``ISEB``, format version, vector
dimension, record count, all little-endian u32 -- followed by the row-major
float32 payload. Per-record metadata lives in a JSON-lines sidecar at
``<path>.meta.jsonl`` (keys ``id``, ``label_id``, ``modality``), one line per
record in payload order.

Classifier outputs are a directory of four ``.iseb`` files (``features``,
``logits``, ``fc_weights``, ``fc_bias``) plus ``manifest.json``.

Stores are immutable after load; readers never mutate shared state, so
concurrent read-only access is safe. Writers own the whole file and go
through a temp file + rename.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    MetadataMismatchError,
    StoreIOError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)

MAGIC = b"ISEB"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")  # magic, version, dim, count -> 16 bytes
MODALITIES = ("text", "image")


@dataclass
class EmbeddingRecord:
    """One embedding with its identity and provenance."""

    id: str
    label_id: Optional[int]
    modality: str
    vector: np.ndarray


@dataclass
class EmbeddingStore:
    """Fixed-dimension float32 corpus with per-record metadata.

    ``vectors`` is a (count, dim) float32 matrix; ``ids``, ``label_ids`` and
    ``modalities`` run parallel to its rows.
    """

    dim: int
    ids: list[str]
    label_ids: list[Optional[int]]
    modalities: list[str]
    vectors: np.ndarray

    @property
    def count(self) -> int:
        return len(self.ids)

    def record(self, i: int) -> EmbeddingRecord:
        return EmbeddingRecord(
            id=self.ids[i],
            label_id=self.label_ids[i],
            modality=self.modalities[i],
            vector=self.vectors[i],
        )

    def records(self) -> Iterator[EmbeddingRecord]:
        for i in range(self.count):
            yield self.record(i)

    @classmethod
    def from_records(cls, dim: int, records: Sequence[EmbeddingRecord]) -> "EmbeddingStore":
        vectors = np.zeros((len(records), dim), dtype=np.float32)
        for i, rec in enumerate(records):
            vec = np.asarray(rec.vector, dtype=np.float32)
            if vec.shape != (dim,):
                raise ValidationError(
                    f"record {rec.id!r} has vector shape {vec.shape}, expected ({dim},)"
                )
            vectors[i] = vec
        store = cls(
            dim=dim,
            ids=[r.id for r in records],
            label_ids=[r.label_id for r in records],
            modalities=[r.modality for r in records],
            vectors=vectors,
        )
        store.validate()
        return store

    @classmethod
    def from_arrays(
        cls,
        vectors: np.ndarray,
        ids: Optional[Sequence[str]] = None,
        label_ids: Optional[Sequence[Optional[int]]] = None,
        modality: str = "image",
    ) -> "EmbeddingStore":
        """Build a store from a (count, dim) matrix, making up ids if absent."""
        vectors = np.ascontiguousarray(np.asarray(vectors, dtype=np.float32))
        if vectors.ndim != 2:
            raise ValidationError(f"vectors must be 2-D, got shape {vectors.shape}")
        n = vectors.shape[0]
        store = cls(
            dim=int(vectors.shape[1]),
            ids=list(ids) if ids is not None else [f"v{i:06d}" for i in range(n)],
            label_ids=list(label_ids) if label_ids is not None else [None] * n,
            modalities=[modality] * n,
            vectors=vectors,
        )
        store.validate()
        return store

    def validate(self) -> None:
        if self.dim <= 0:
            raise ValidationError(f"dim must be positive, got {self.dim}")
        n = len(self.ids)
        if not (len(self.label_ids) == len(self.modalities) == n):
            raise ValidationError("metadata columns have inconsistent lengths")
        if self.vectors.shape != (n, self.dim):
            raise ValidationError(
                f"vectors shape {self.vectors.shape} != ({n}, {self.dim})"
            )
        if self.vectors.dtype != np.float32:
            raise ValidationError(f"vectors must be float32, got {self.vectors.dtype}")
        if len(set(self.ids)) != n:
            seen: set[str] = set()
            for i in self.ids:
                if i in seen:
                    raise ValidationError(f"duplicate id {i!r}")
                seen.add(i)
        for m in set(self.modalities):
            if m not in MODALITIES:
                raise ValidationError(f"unknown modality {m!r}")
        for lid in self.label_ids:
            if lid is not None and not isinstance(lid, (int, np.integer)):
                raise ValidationError(f"label_id must be int or null, got {lid!r}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.ids == other.ids
            and self.label_ids == other.label_ids
            and self.modalities == other.modalities
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


def _meta_path(path: Path) -> Path:
    return Path(str(path) + ".meta.jsonl")


def write_store(store: EmbeddingStore, path: str | os.PathLike) -> None:
    """Write ``store`` to ``path`` (+ metadata sidecar). Validates first; on
    invariant violation nothing is written."""
    store.validate()
    path = Path(path)
    payload = np.ascontiguousarray(store.vectors, dtype="<f4").tobytes()
    header = HEADER.pack(MAGIC, FORMAT_VERSION, store.dim, store.count)

    tmp = path.with_name(path.name + ".tmp")
    tmp_meta = _meta_path(path).with_name(_meta_path(path).name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(header)
            f.write(payload)
        with open(tmp_meta, "w", encoding="utf-8") as f:
            for i in range(store.count):
                line = {
                    "id": store.ids[i],
                    "label_id": None
                    if store.label_ids[i] is None
                    else int(store.label_ids[i]),
                    "modality": store.modalities[i],
                }
                f.write(json.dumps(line, ensure_ascii=False) + "\n")
        tmp.replace(path)
        tmp_meta.replace(_meta_path(path))
    except OSError as exc:
        for t in (tmp, tmp_meta):
            if t.exists():
                t.unlink()
        raise StoreIOError(f"failed writing {path}: {exc}") from exc


def read_store(path: str | os.PathLike) -> EmbeddingStore:
    """Read a store written by :func:`write_store`.

    Fails with a distinct error for bad magic, unsupported version, payload
    size mismatch, or a sidecar that disagrees with the header. Never returns
    partially parsed data.
    """
    path = Path(path)
    if not path.exists():
        raise StoreIOError(f"no such store: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the 16-byte header")
    magic, version, dim, count = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, this reader supports {FORMAT_VERSION}"
        )
    expected = HEADER.size + 4 * dim * count
    if len(raw) != expected:
        raise TruncatedPayloadError(
            f"{path}: {len(raw)} bytes on disk, header implies {expected}"
        )
    vectors = np.frombuffer(raw[HEADER.size:], dtype="<f4").reshape(count, dim).copy()

    meta = _meta_path(path)
    if not meta.exists():
        raise MetadataMismatchError(f"{path}: metadata sidecar {meta} missing")
    ids: list[str] = []
    label_ids: list[Optional[int]] = []
    modalities: list[str] = []
    with open(meta, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetadataMismatchError(f"{meta}:{lineno}: invalid JSON") from exc
            ids.append(obj["id"])
            label_ids.append(obj["label_id"])
            modalities.append(obj["modality"])
    if len(ids) != count:
        raise MetadataMismatchError(
            f"{meta}: {len(ids)} metadata lines for {count} records"
        )
    store = EmbeddingStore(
        dim=int(dim), ids=ids, label_ids=label_ids, modalities=modalities, vectors=vectors
    )
    try:
        store.validate()
    except ValidationError as exc:
        raise MetadataMismatchError(f"{path}: {exc}") from exc
    return store


def normalize_store(store: EmbeddingStore) -> EmbeddingStore:
    """Return a copy with every vector rescaled to unit Euclidean norm.

    A zero vector indicates upstream extraction failure, so it is an error
    (naming the offending id), not a silent skip.
    """
    norms = np.linalg.norm(store.vectors.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValidationError(f"zero vector for id {store.ids[int(zero[0])]!r}")
    vectors = (store.vectors.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingStore(
        dim=store.dim,
        ids=list(store.ids),
        label_ids=list(store.label_ids),
        modalities=list(store.modalities),
        vectors=vectors,
    )


# --- classifier outputs -----------------------------------------------------

OUTPUT_FILES = ("features", "logits", "fc_weights", "fc_bias")
LOGITS_ATOL = 1e-3


@dataclass
class ClassifierOutputs:
    """Penultimate features, logits, and the final linear head for a corpus."""

    ids: list[str]
    features: np.ndarray  # (n, d) float32
    logits: np.ndarray  # (n, C) float32
    fc_weights: np.ndarray  # (C, d) float32
    fc_bias: np.ndarray  # (C,) float32
    label_ids: list[Optional[int]] = field(default_factory=list)
    model_name: str = "unknown"

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_classes(self) -> int:
        return int(self.logits.shape[1])

    def validate(self, check_consistency: bool = True) -> None:
        n = len(self.ids)
        if self.features.shape[0] != n or self.logits.shape[0] != n:
            raise ValidationError("features/logits row count != number of ids")
        c, d = self.fc_weights.shape
        if self.logits.shape[1] != c:
            raise ValidationError(
                f"logits have {self.logits.shape[1]} columns, head has {c} classes"
            )
        if self.features.shape[1] != d:
            raise ValidationError(
                f"features dim {self.features.shape[1]} != head input dim {d}"
            )
        if self.fc_bias.shape != (c,):
            raise ValidationError(f"fc_bias shape {self.fc_bias.shape} != ({c},)")
        if check_consistency and n > 0:
            recomputed = self.features @ self.fc_weights.T + self.fc_bias
            err = float(np.max(np.abs(recomputed - self.logits)))
            if err > LOGITS_ATOL:
                raise ValidationError(
                    f"logits disagree with fc_weights @ features + fc_bias: "
                    f"max abs error {err:.3e} > {LOGITS_ATOL}"
                )


def write_outputs(outputs: ClassifierOutputs, out_dir: str | os.PathLike) -> None:
    outputs.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_classes = outputs.n_classes
    label_ids = outputs.label_ids if outputs.label_ids else [None] * outputs.n

    write_store(
        EmbeddingStore.from_arrays(outputs.features, ids=outputs.ids, label_ids=label_ids),
        out_dir / "features.iseb",
    )
    write_store(
        EmbeddingStore.from_arrays(outputs.logits, ids=outputs.ids, label_ids=label_ids),
        out_dir / "logits.iseb",
    )
    write_store(
        EmbeddingStore.from_arrays(
            outputs.fc_weights, ids=[f"class_{c}" for c in range(n_classes)]
        ),
        out_dir / "fc_weights.iseb",
    )
    write_store(
        EmbeddingStore.from_arrays(outputs.fc_bias.reshape(1, -1), ids=["bias"]),
        out_dir / "fc_bias.iseb",
    )
    manifest = {"d": outputs.d, "C": n_classes, "model_name": outputs.model_name}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")


def read_outputs(out_dir: str | os.PathLike) -> ClassifierOutputs:
    """Read a classifier-output directory, validating shapes against the
    manifest and logits against the head when everything is present."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        raise StoreIOError(f"{out_dir}: manifest.json missing")
    manifest = json.loads(manifest_path.read_text())

    features = read_store(out_dir / "features.iseb")
    logits = read_store(out_dir / "logits.iseb")
    fc_weights = read_store(out_dir / "fc_weights.iseb")
    fc_bias = read_store(out_dir / "fc_bias.iseb")

    if features.ids != logits.ids:
        raise MetadataMismatchError(f"{out_dir}: features and logits id order differ")
    if features.dim != manifest["d"] or logits.dim != manifest["C"]:
        raise MetadataMismatchError(
            f"{out_dir}: payload dims disagree with manifest (d={manifest['d']}, C={manifest['C']})"
        )
    outputs = ClassifierOutputs(
        ids=features.ids,
        features=features.vectors,
        logits=logits.vectors,
        fc_weights=fc_weights.vectors,
        fc_bias=fc_bias.vectors[0],
        label_ids=features.label_ids,
        model_name=manifest.get("model_name", "unknown"),
    )
    outputs.validate()
    return outputs
