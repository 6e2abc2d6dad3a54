"""Orthogonal feature-space decomposition trained on contrastive text triplets.

An l-by-l transform maps a feature so that its first half carries semantic
(label) content and its second half carries covariate (style/augmentation)
content. Training pulls features that share a label together in the semantic
half and features that share a style prompt together in the covariate half,
with a margin hinge, while a penalty keeps the transform orthogonal so no
information is lost.

Training is single-threaded, full analytic gradients, deterministic given the
seed. The trained matrix is immutable and freely shareable across workers.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    NumericalError,
    StoreIOError,
    TruncatedPayloadError,
    ValidationError,
)
from .store import EmbeddingStore

PLACEHOLDER = "{object}"
MATRIX_MAGIC = b"ISW1"
TRAIN_MANIFEST_NAME = "train_manifest.json"


@dataclass
class TrainConfig:
    """Hyperparameters for the transform training loop."""

    alpha: float = 0.2
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 256
    seed: int = 0
    orth_weight: float = 1.0

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")


@dataclass
class DecompositionMatrix:
    """The trained l-by-l orthogonal transform and its training provenance."""

    l: int
    W: np.ndarray
    trained: bool = False
    train_manifest: dict = field(default_factory=dict)

    @property
    def half(self) -> int:
        return self.l // 2

    def fingerprint(self) -> str:
        return hashlib.sha256(
            np.ascontiguousarray(self.W, dtype="<f4").tobytes()
        ).hexdigest()[:16]

    @classmethod
    def identity(cls, l: int) -> "DecompositionMatrix":
        if l % 2 != 0 or l <= 0:
            raise ValidationError(f"feature length must be even and positive, got {l}")
        return cls(l=l, W=np.eye(l, dtype=np.float32))


@dataclass
class TripletCorpusSpec:
    """Label vocabulary and style-prompt templates used to render the text corpus.

    Every template must contain exactly one ``{object}`` placeholder; a
    rendering is plain string substitution of a label into a template.
    """

    semantic_labels: list[str]
    covariate_prompts: list[str]
    pairing_seed: int = 0

    def validate(self) -> None:
        if not self.semantic_labels or not self.covariate_prompts:
            raise ValidationError("semantic_labels and covariate_prompts must be non-empty")
        for tpl in self.covariate_prompts:
            if tpl.count(PLACEHOLDER) != 1:
                raise ValidationError(
                    f"template {tpl!r} must contain exactly one {PLACEHOLDER} placeholder"
                )

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "TripletCorpusSpec":
        obj = json.loads(Path(path).read_text())
        spec = cls(
            semantic_labels=list(obj["semantic_labels"]),
            covariate_prompts=list(obj["covariate_prompts"]),
            pairing_seed=int(obj.get("pairing_seed", 0)),
        )
        spec.validate()
        return spec


def render_text(template: str, label: str) -> str:
    return template.replace(PLACEHOLDER, label)


@dataclass
class TextTriplet:
    """Features of a standard text, its label-shifted contrast, and its
    prompt-shifted contrast. All three unit-norm."""

    t_st: np.ndarray
    t_ss: np.ndarray
    t_cs: np.ndarray


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b), in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine distance undefined for a zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def decompose(f: np.ndarray, dm: DecompositionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Split a feature (or a batch of features, one per row) into its
    semantic and covariate halves under the transform."""
    f = np.asarray(f)
    if f.shape[-1] != dm.l:
        raise ValidationError(f"feature length {f.shape[-1]} != transform size {dm.l}")
    z = f @ dm.W
    return z[..., : dm.half], z[..., dm.half:]


def triplet_and_orth_losses(
    t: TextTriplet, W: np.ndarray, alpha: float
) -> tuple[float, float, float]:
    """Hinged semantic/covariate triplet losses and the orthogonality penalty
    for one triplet. Distances are cosine on the decomposed halves."""
    sem, cov, orth, _ = batch_loss_and_grad(
        t.t_st[None, :], t.t_ss[None, :], t.t_cs[None, :], W, alpha,
        orth_weight=1.0, want_grad=False,
    )
    return sem, cov, orth


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def _cos_dist_rows(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    nu, nv = _row_norms(u), _row_norms(v)
    dots = np.einsum("ij,ij->i", u, v)
    sim = dots / (nu * nv)
    return 1.0 - sim, sim, nu, nv


def _cos_dist_grads(u, v, sim, nu, nv) -> tuple[np.ndarray, np.ndarray]:
    # d/du (1 - u.v / |u||v|) = sim*u/|u|^2 - v/(|u||v|), rowwise; symmetric in v.
    gu = (sim / nu**2)[:, None] * u - v / (nu * nv)[:, None]
    gv = (sim / nv**2)[:, None] * v - u / (nu * nv)[:, None]
    return gu, gv


def _quiet_numerics(fn):
    """Route overflow on divergent iterates to the finiteness check instead
    of warning spam."""
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)
    wrapper.__doc__ = fn.__doc__
    wrapper.__name__ = fn.__name__
    return wrapper


@_quiet_numerics
def batch_loss_and_grad(
    T_st: np.ndarray,
    T_ss: np.ndarray,
    T_cs: np.ndarray,
    W: np.ndarray,
    alpha: float,
    orth_weight: float = 1.0,
    want_grad: bool = True,
) -> tuple[float, float, float, Optional[np.ndarray]]:
    """Mean hinged triplet losses, orthogonality penalty, and (optionally)
    the analytic gradient of their weighted sum with respect to W.

    Works in float64 regardless of the input dtype so the gradient matches
    central finite differences to high relative precision.
    """
    W = np.asarray(W, dtype=np.float64)
    l = W.shape[0]
    h = l // 2
    T_st = np.asarray(T_st, dtype=np.float64)
    T_ss = np.asarray(T_ss, dtype=np.float64)
    T_cs = np.asarray(T_cs, dtype=np.float64)
    n = T_st.shape[0]

    Z_st, Z_ss, Z_cs = T_st @ W, T_ss @ W, T_cs @ W
    A_st, B_st = Z_st[:, :h], Z_st[:, h:]
    A_ss, B_ss = Z_ss[:, :h], Z_ss[:, h:]
    A_cs, B_cs = Z_cs[:, :h], Z_cs[:, h:]

    # Semantic half: pull same-label pair (st, cs) below same-prompt pair (st, ss).
    d_sc, s_sc, n1, n2 = _cos_dist_rows(A_st, A_cs)
    d_ss, s_ss, n3, n4 = _cos_dist_rows(A_st, A_ss)
    sem_margin = d_sc - d_ss + alpha
    sem_active = sem_margin > 0.0
    loss_sem = float(np.mean(np.where(sem_active, sem_margin, 0.0)))

    # Covariate half: pull same-prompt pair (st, ss) below same-label pair (st, cs).
    e_ss, t_ss_sim, m1, m2 = _cos_dist_rows(B_st, B_ss)
    e_sc, t_sc_sim, m3, m4 = _cos_dist_rows(B_st, B_cs)
    cov_margin = e_ss - e_sc + alpha
    cov_active = cov_margin > 0.0
    loss_cov = float(np.mean(np.where(cov_active, cov_margin, 0.0)))

    gram_defect = W.T @ W - np.eye(l)
    loss_orth = float(np.sum(gram_defect**2))

    if not np.isfinite(loss_sem) or not np.isfinite(loss_cov) or not np.isfinite(loss_orth):
        raise NumericalError(
            f"non-finite loss components: sem={loss_sem}, cov={loss_cov}, orth={loss_orth}"
        )
    if not want_grad:
        return loss_sem, loss_cov, loss_orth, None

    grad = orth_weight * 4.0 * (W @ gram_defect)

    w_sem = sem_active.astype(np.float64) / n
    if np.any(sem_active):
        g_sc_u, g_sc_v = _cos_dist_grads(A_st, A_cs, s_sc, n1, n2)
        g_ss_u, g_ss_v = _cos_dist_grads(A_st, A_ss, s_ss, n3, n4)
        GA_st = w_sem[:, None] * (g_sc_u - g_ss_u)
        GA_cs = w_sem[:, None] * g_sc_v
        GA_ss = -w_sem[:, None] * g_ss_v
        grad[:, :h] += T_st.T @ GA_st + T_cs.T @ GA_cs + T_ss.T @ GA_ss

    w_cov = cov_active.astype(np.float64) / n
    if np.any(cov_active):
        g_ss_u, g_ss_v = _cos_dist_grads(B_st, B_ss, t_ss_sim, m1, m2)
        g_sc_u, g_sc_v = _cos_dist_grads(B_st, B_cs, t_sc_sim, m3, m4)
        GB_st = w_cov[:, None] * (g_ss_u - g_sc_u)
        GB_ss = w_cov[:, None] * g_ss_v
        GB_cs = -w_cov[:, None] * g_sc_v
        grad[:, h:] += T_st.T @ GB_st + T_ss.T @ GB_ss + T_cs.T @ GB_cs

    return loss_sem, loss_cov, loss_orth, grad


def build_triplet_corpus(
    spec: TripletCorpusSpec, text_features: EmbeddingStore
) -> list[TextTriplet]:
    """Assemble one epoch of triplets from pre-extracted text features.

    Every (label, prompt) rendering serves as the standard text exactly once,
    in an order shuffled by ``pairing_seed``; its label-shifted contrast keeps
    the prompt and swaps the label, its prompt-shifted contrast keeps the
    label and swaps the prompt, both chosen pseudo-randomly from the same seed.
    """
    spec.validate()
    if len(spec.semantic_labels) < 2:
        raise ValidationError("need at least 2 semantic labels to form a contrast")
    if len(spec.covariate_prompts) < 2:
        raise ValidationError("need at least 2 covariate prompts to form a contrast")

    lookup = {text_features.ids[i]: i for i in range(text_features.count)}

    def feature(label: str, template: str) -> np.ndarray:
        rendering = render_text(template, label)
        idx = lookup.get(rendering)
        if idx is None:
            raise ValidationError(f"text store has no feature for rendering {rendering!r}")
        return text_features.vectors[idx]

    rng = np.random.default_rng(spec.pairing_seed)
    pairs = [
        (li, pi)
        for li in range(len(spec.semantic_labels))
        for pi in range(len(spec.covariate_prompts))
    ]
    rng.shuffle(pairs)

    triplets = []
    n_labels = len(spec.semantic_labels)
    n_prompts = len(spec.covariate_prompts)
    for li, pi in pairs:
        lj = (li + 1 + int(rng.integers(n_labels - 1))) % n_labels
        pj = (pi + 1 + int(rng.integers(n_prompts - 1))) % n_prompts
        label, prompt = spec.semantic_labels[li], spec.covariate_prompts[pi]
        triplets.append(
            TextTriplet(
                t_st=feature(label, prompt),
                t_ss=feature(spec.semantic_labels[lj], prompt),
                t_cs=feature(label, spec.covariate_prompts[pj]),
            )
        )
    return triplets


def _stack_corpus(corpus: Sequence[TextTriplet]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    T_st = np.stack([t.t_st for t in corpus]).astype(np.float64)
    T_ss = np.stack([t.t_ss for t in corpus]).astype(np.float64)
    T_cs = np.stack([t.t_cs for t in corpus]).astype(np.float64)
    return T_st, T_ss, T_cs


def train_decomposition(
    corpus: Sequence[TextTriplet], config: TrainConfig
) -> DecompositionMatrix:
    """Gradient-descend the transform on the triplet corpus.

    Plain fixed-step descent over mini-batches, W initialized to the identity
    (orthogonal at step 0, and an exact fixed point when the corpus is already
    decomposed along the coordinate halves). Deterministic given the seed.
    """
    config.validate()
    corpus = list(corpus)
    if not corpus:
        raise ValidationError("empty triplet corpus")
    l = int(corpus[0].t_st.shape[0])
    if l % 2 != 0:
        raise ValidationError(f"feature length must be even, got {l}")

    T_st, T_ss, T_cs = _stack_corpus(corpus)
    n = T_st.shape[0]
    W = np.eye(l, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    epoch_losses: list[float] = []

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            try:
                _, _, _, grad = batch_loss_and_grad(
                    T_st[idx], T_ss[idx], T_cs[idx], W, config.alpha, config.orth_weight
                )
            except NumericalError as exc:
                raise NumericalError(
                    f"epoch {epoch}, batch at offset {start}: {exc}"
                ) from exc
            W -= config.learning_rate * grad

        try:
            sem, cov, orth, _ = batch_loss_and_grad(
                T_st, T_ss, T_cs, W, config.alpha, config.orth_weight, want_grad=False
            )
        except NumericalError as exc:
            raise NumericalError(f"epoch {epoch}, corpus evaluation: {exc}") from exc
        epoch_losses.append(sem + cov + config.orth_weight * orth)

    sem, cov, orth, _ = batch_loss_and_grad(
        T_st, T_ss, T_cs, W, config.alpha, config.orth_weight, want_grad=False
    )
    manifest = {
        "alpha": config.alpha,
        "learning_rate": config.learning_rate,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "orth_weight": config.orth_weight,
        "n_triplets": n,
        "hinge": True,
        "final_losses": {"sem": sem, "cov": cov, "orth": orth},
        "epoch_losses": epoch_losses,
        "orth_residual": float(np.linalg.norm(W.T @ W - np.eye(l))),
    }
    return DecompositionMatrix(l=l, W=W.astype(np.float32), trained=True, train_manifest=manifest)


def write_matrix(dm: DecompositionMatrix, path: str | os.PathLike) -> None:
    """Persist the transform (magic + size + row-major float32) and its
    training manifest next to it."""
    path = Path(path)
    payload = np.ascontiguousarray(dm.W, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(MATRIX_MAGIC)
        f.write(struct.pack("<I", dm.l))
        f.write(payload)
    manifest = dict(dm.train_manifest)
    manifest["trained"] = dm.trained
    manifest["fingerprint"] = dm.fingerprint()
    (path.parent / TRAIN_MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


def read_matrix(path: str | os.PathLike) -> DecompositionMatrix:
    path = Path(path)
    if not path.exists():
        raise StoreIOError(f"no such matrix file: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: shorter than the 8-byte header")
    if raw[:4] != MATRIX_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MATRIX_MAGIC!r}")
    (l,) = struct.unpack("<I", raw[4:8])
    expected = 8 + 4 * l * l
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path}: {len(raw)} bytes, header implies {expected}")
    W = np.frombuffer(raw[8:], dtype="<f4").reshape(l, l).copy()
    manifest_path = path.parent / TRAIN_MANIFEST_NAME
    manifest: dict = {}
    trained = False
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        trained = bool(manifest.pop("trained", True))
    return DecompositionMatrix(l=int(l), W=W, trained=trained, train_manifest=manifest)


def zero_shot_eval(
    images: EmbeddingStore,
    class_texts: EmbeddingStore,
    dm: Optional[DecompositionMatrix],
    part: str = "full",
) -> tuple[float, float]:
    """Classify each image by maximum cosine similarity between the selected
    feature part and each class text's same part; return (top-1, top-5).

    ``class_texts`` row c is class c; image label_ids index into it.
    """
    if part not in ("full", "semantic", "covariate"):
        raise ValidationError(f"unknown part {part!r}")
    if images.count == 0:
        raise ValidationError("empty image store")
    n_classes = class_texts.count
    labels = np.array(
        [-1 if lid is None else int(lid) for lid in images.label_ids], dtype=np.int64
    )
    if labels.min() < 0 or labels.max() >= n_classes:
        bad = images.ids[int(np.argmax((labels < 0) | (labels >= n_classes)))]
        raise ValidationError(
            f"label_id for {bad!r} outside class range 0..{n_classes - 1}"
        )

    if part == "full":
        img = images.vectors.astype(np.float64)
        txt = class_texts.vectors.astype(np.float64)
    else:
        if dm is None:
            raise ValidationError("decomposed evaluation requires a transform")
        img_sem, img_cov = decompose(images.vectors.astype(np.float64), dm)
        txt_sem, txt_cov = decompose(class_texts.vectors.astype(np.float64), dm)
        img = img_sem if part == "semantic" else img_cov
        txt = txt_sem if part == "semantic" else txt_cov

    # a decomposed half can be identically zero; leave such rows unnormalized
    # so they express no preference instead of dividing by zero
    img_n = np.linalg.norm(img, axis=1, keepdims=True)
    txt_n = np.linalg.norm(txt, axis=1, keepdims=True)
    img = np.divide(img, img_n, out=np.zeros_like(img), where=img_n > 0)
    txt = np.divide(txt, txt_n, out=np.zeros_like(txt), where=txt_n > 0)
    sims = img @ txt.T

    top1 = float(np.mean(np.argmax(sims, axis=1) == labels))
    k = min(5, n_classes)
    topk = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    top5 = float(np.mean(np.any(topk == labels[:, None], axis=1)))
    return top1, top5


def principal_components(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Principal directions (rows) and their explained variances, variance-
    descending. X is centered before the fit."""
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    denom = max(X.shape[0] - 1, 1)
    return vt, s**2 / denom


def retained_components(
    components: np.ndarray, variances: np.ndarray, variance_fraction: float
) -> np.ndarray:
    """Leading components whose cumulative explained variance first reaches
    the requested fraction of the total (zero-variance tail never retained)."""
    if not (0.0 < variance_fraction <= 1.0):
        raise ValidationError(
            f"variance_fraction must be in (0, 1], got {variance_fraction}"
        )
    total = float(np.sum(variances))
    if total == 0.0:
        raise ValidationError("data has zero variance; nothing to retain")
    nonzero = variances > total * 1e-12
    cum = np.cumsum(variances[nonzero]) / total
    k = int(np.searchsorted(cum, variance_fraction - 1e-12) + 1)
    k = min(k, int(np.sum(nonzero)))
    return components[:k]


def pca_baseline_decompose(
    text_features: EmbeddingStore,
    spec: TripletCorpusSpec,
    variance_fraction: float = 0.9,
) -> tuple[np.ndarray, np.ndarray]:
    """Variance-based baseline for the trained transform.

    Semantic projection: principal directions of the features after removing
    each prompt-group mean (variation attributable to labels). Covariate
    projection: same with label groups (variation attributable to prompts).
    Returns (semantic, covariate) projection matrices, one direction per row.
    """
    spec.validate()
    if not (0.0 < variance_fraction <= 1.0):
        raise ValidationError(
            f"variance_fraction must be in (0, 1], got {variance_fraction}"
        )
    lookup = {text_features.ids[i]: i for i in range(text_features.count)}

    grid = np.zeros(
        (len(spec.semantic_labels), len(spec.covariate_prompts), text_features.dim),
        dtype=np.float64,
    )
    for li, label in enumerate(spec.semantic_labels):
        for pi, prompt in enumerate(spec.covariate_prompts):
            rendering = render_text(prompt, label)
            idx = lookup.get(rendering)
            if idx is None:
                raise ValidationError(
                    f"text store has no feature for rendering {rendering!r}"
                )
            grid[li, pi] = text_features.vectors[idx]

    sem_resid = (grid - grid.mean(axis=0, keepdims=True)).reshape(-1, text_features.dim)
    cov_resid = (grid - grid.mean(axis=1, keepdims=True)).reshape(-1, text_features.dim)

    sem_dirs, sem_var = principal_components(sem_resid)
    cov_dirs, cov_var = principal_components(cov_resid)
    return (
        retained_components(sem_dirs, sem_var, variance_fraction),
        retained_components(cov_dirs, cov_var, variance_fraction),
    )
