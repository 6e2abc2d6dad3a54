"""Shared synthetic data builders for the test suite.

Everything here is seeded and deterministic. The planted constructions put
known structure into known subspaces so tests can assert recovery instead of
eyeballing numbers.
"""

from __future__ import annotations

import numpy as np
import pytest

from isood.decomposition import TripletCorpusSpec, render_text
from isood.store import ClassifierOutputs, EmbeddingStore


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def separated_directions(n: int, dim: int, rng: np.random.Generator, pool: int = 4000) -> np.ndarray:
    """n unit vectors chosen greedily (farthest-point) from a random pool, so
    every pair keeps a healthy cosine distance and triplet margins stay
    satisfiable."""
    cand = rng.standard_normal((pool, dim))
    cand /= np.linalg.norm(cand, axis=1, keepdims=True)
    chosen = [cand[0]]
    dist = 1.0 - cand @ cand[0]
    for _ in range(n - 1):
        i = int(np.argmax(dist))
        chosen.append(cand[i])
        dist = np.minimum(dist, 1.0 - cand @ cand[i])
    return np.stack(chosen)


def corpus_from_directions(label_dirs, prompt_dirs, basis, seed):
    """Text corpus with explicit per-label and per-prompt directions planted
    in the two halves of ``basis``. Returns (spec, store)."""
    l = basis.shape[0]
    h = l // 2
    q_sem, q_cov = basis[:, :h], basis[:, h:]
    labels = [f"object {c}" for c in range(len(label_dirs))]
    prompts = [f"a rendering {p} of {{object}}" for p in range(len(prompt_dirs))]
    spec = TripletCorpusSpec(semantic_labels=labels, covariate_prompts=prompts, pairing_seed=seed)
    ids, vecs = [], []
    for c, label in enumerate(labels):
        for p, prompt in enumerate(prompts):
            v = q_sem @ label_dirs[c] + q_cov @ prompt_dirs[p]
            ids.append(render_text(prompt, label))
            vecs.append(v / np.linalg.norm(v))
    store = EmbeddingStore.from_arrays(
        np.stack(vecs).astype(np.float32), ids=ids, modality="text"
    )
    return spec, store


def planted_text_corpus(
    l: int = 16,
    n_labels: int = 10,
    n_prompts: int = 8,
    seed: int = 0,
    aligned: bool = False,
    noise: float = 0.0,
):
    """Text corpus whose label variation lives in one l/2-dim subspace and
    whose prompt variation lives in the complement.

    ``aligned=True`` puts the label subspace exactly on the first l/2
    coordinates, making the identity transform optimal. Returns
    (spec, store, basis) with basis columns [semantic | covariate].
    """
    rng = np.random.default_rng(seed)
    h = l // 2
    basis = np.eye(l) if aligned else random_orthogonal(l, rng)
    q_sem, q_cov = basis[:, :h], basis[:, h:]

    def unit(v):
        return v / np.linalg.norm(v)

    label_dirs = np.stack([unit(rng.standard_normal(h)) for _ in range(n_labels)])
    prompt_dirs = np.stack([unit(rng.standard_normal(h)) for _ in range(n_prompts)])

    labels = [f"object {c}" for c in range(n_labels)]
    prompts = [f"a rendering {p} of {{object}}" for p in range(n_prompts)]
    spec = TripletCorpusSpec(semantic_labels=labels, covariate_prompts=prompts, pairing_seed=seed)

    ids, vectors = [], []
    for c, label in enumerate(labels):
        for p, prompt in enumerate(prompts):
            vec = q_sem @ label_dirs[c] + q_cov @ prompt_dirs[p]
            if noise > 0:
                vec = vec + noise * rng.standard_normal(l)
            ids.append(render_text(prompt, label))
            vectors.append(unit(vec))
    store = EmbeddingStore.from_arrays(
        np.stack(vectors).astype(np.float32), ids=ids, modality="text"
    )
    return spec, store, basis


def planted_image_stores(
    basis: np.ndarray,
    n_labels: int,
    n_per_label: int = 20,
    seed: int = 1,
    noise: float = 0.05,
):
    """Image-side stores matching :func:`planted_text_corpus`: per-class text
    anchors and noisy images whose covariate component varies freely.

    Returns (images, class_texts).
    """
    rng = np.random.default_rng(seed)
    l = basis.shape[0]
    h = l // 2
    q_sem, q_cov = basis[:, :h], basis[:, h:]

    def unit(v):
        return v / np.linalg.norm(v)

    label_dirs = np.stack([unit(rng.standard_normal(h)) for _ in range(n_labels)])

    class_vecs = np.stack([unit(q_sem @ label_dirs[c]) for c in range(n_labels)])
    class_texts = EmbeddingStore.from_arrays(
        class_vecs.astype(np.float32),
        ids=[f"class {c}" for c in range(n_labels)],
        label_ids=list(range(n_labels)),
        modality="text",
    )

    ids, vecs, lids = [], [], []
    for c in range(n_labels):
        for i in range(n_per_label):
            cov = unit(rng.standard_normal(h))
            vec = q_sem @ label_dirs[c] + q_cov @ cov + noise * rng.standard_normal(l)
            ids.append(f"img {c} {i}")
            vecs.append(unit(vec))
            lids.append(c)
    images = EmbeddingStore.from_arrays(
        np.stack(vecs).astype(np.float32), ids=ids, label_ids=lids, modality="image"
    )
    return images, class_texts


def planted_benchmark_outputs(
    n_levels: int = 8,
    n_per_cell: int = 200,
    n_id: int = 1000,
    n_classes: int = 10,
    noise: float = 0.5,
    sem_step: float = 0.18,
    nuisance_amp: float = 0.5,
    head_scale: float = 0.45,
    seed: int = 7,
):
    """ID cluster plus an (n_levels x n_levels) grid of shifted clusters.

    Semantic level s shrinks the class-aligned coordinate by s * sem_step, so
    logits fall and feature-space distance grows smoothly across levels;
    covariate level adds an offset in a nuisance subspace the head cannot see.
    Everything is rotated by a random orthogonal map and shifted non-negative,
    with the bias absorbing the shift so the planted logits survive exactly.
    Returns (id_outputs, test_outputs, grid) where grid maps
    (level_sem, level_cov) to the cell's ids.
    """
    rng = np.random.default_rng(seed)
    d = 2 * n_classes + 8
    rot = random_orthogonal(d, rng)

    def raw_features(n, level_sem):
        cls = rng.integers(0, n_classes, size=n)
        base = np.zeros((n, d))
        base[np.arange(n), cls] = 4.0 - sem_step * level_sem
        base += noise * rng.standard_normal((n, d))
        return base

    def nuisance(n, level_cov):
        out = np.zeros((n, d))
        out[:, 2 * n_classes:] = nuisance_amp * (level_cov / n_levels) * rng.standard_normal(
            (n, d - 2 * n_classes)
        )
        return out

    fc_weights = (head_scale * np.eye(n_classes, d) @ rot.T).astype(np.float64)

    blocks = [("id", 0, 0, raw_features(n_id, 0))]
    for ls in range(1, n_levels + 1):
        for lc in range(1, n_levels + 1):
            feats = raw_features(n_per_cell, ls) + nuisance(n_per_cell, lc)
            blocks.append((f"cell{ls}_{lc}", ls, lc, feats))

    rotated = [f @ rot.T for _, _, _, f in blocks]
    offset = -min(r.min() for r in rotated) + 0.5
    fc_bias = -fc_weights @ np.full(d, offset)

    def to_outputs(name, feats):
        feats = (feats + offset).astype(np.float32)
        logits = (feats.astype(np.float64) @ fc_weights.T + fc_bias).astype(np.float32)
        ids = [f"{name}_{i}" for i in range(len(feats))]
        return ClassifierOutputs(
            ids=ids,
            features=feats,
            logits=logits,
            fc_weights=fc_weights.astype(np.float32),
            fc_bias=fc_bias.astype(np.float32),
            model_name="planted",
        )

    id_outputs = to_outputs("id", rotated[0])

    test_feats = np.concatenate(rotated[1:], axis=0)
    test_ids, grid = [], {}
    row = 0
    for name, ls, lc, f in blocks[1:]:
        ids = [f"{name}_{i}" for i in range(len(f))]
        grid[(ls, lc)] = ids
        test_ids.extend(ids)
        row += len(f)
    test_outputs = to_outputs("test", test_feats)
    test_outputs.ids = test_ids
    return id_outputs, test_outputs, grid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
