"""Post-hoc OOD confidence scores computed from classifier outputs.

Every scorer is a pure function of penultimate features, logits, and the
final linear head -- no live network. Orientation contract: higher score =
more ID-like; raw statistics that point the other way (Mahalanobis and
nearest-neighbor distances) are negated here.

Per-sample scoring is embarrassingly parallel except the rank-1 feature
removal, which must see its whole batch at once.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import NumericalError, StoreIOError, ValidationError
from .store import ClassifierOutputs

SCORER_NAMES = ("msp", "odin", "energy", "mds", "knn", "gradnorm", "dice", "ash", "rankfeat")

DEFAULT_ODIN_T = 1000.0
DEFAULT_KNN_K = 50
DEFAULT_DICE_P = 0.7
DEFAULT_ASH_PERCENTILE = 0.9
POWER_ITER_TOL = 1e-6
# 500 steps cannot certify the advertised accuracy when the top spectral gap
# is narrow (ratio ~0.98 needs ~550); 2000 leaves generous headroom
POWER_ITER_MAX = 2000


@dataclass
class ScoreVector:
    """Per-id confidence scores from one scorer run."""

    ids: list[str]
    scores: np.ndarray
    scorer_name: str
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.scores.shape != (len(self.ids),):
            raise ValidationError("one score per id required")
        if np.any(~np.isfinite(self.scores)):
            raise ValidationError(f"{self.scorer_name}: non-finite scores")


def write_scores(sv: ScoreVector, path: str | os.PathLike) -> None:
    sv.validate()
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"scorer_name": sv.scorer_name, "params": sv.params}, sort_keys=True) + "\n")
        for i, sample_id in enumerate(sv.ids):
            f.write(json.dumps({"id": sample_id, "score": float(sv.scores[i])}, sort_keys=True) + "\n")


def read_scores(path: str | os.PathLike) -> ScoreVector:
    path = Path(path)
    if not path.exists():
        raise StoreIOError(f"no such score file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or "scorer_name" not in lines[0]:
        raise StoreIOError(f"{path}: missing scorer header line")
    sv = ScoreVector(
        ids=[r["id"] for r in lines[1:]],
        scores=np.array([r["score"] for r in lines[1:]], dtype=np.float64),
        scorer_name=lines[0]["scorer_name"],
        params=lines[0].get("params", {}),
    )
    sv.validate()
    return sv


# --- shared pieces ----------------------------------------------------------

def _check_finite(name: str, x: np.ndarray) -> None:
    if np.any(~np.isfinite(x)):
        raise ValidationError(f"{name}: non-finite input values")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]


def compute_logits(features: np.ndarray, fc_weights: np.ndarray, fc_bias: np.ndarray) -> np.ndarray:
    return features @ fc_weights.T + fc_bias


def _vector(ids, scores, name, **params) -> ScoreVector:
    sv = ScoreVector(ids=list(ids), scores=np.asarray(scores, dtype=np.float64),
                     scorer_name=name, params=params)
    sv.validate()
    return sv


# --- logit-based scorers ----------------------------------------------------

def msp_score(logits: np.ndarray, ids: Optional[list[str]] = None) -> ScoreVector:
    """Maximum softmax probability."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[1] < 2:
        raise ValidationError("need at least 2 classes")
    _check_finite("msp", logits)
    scores = softmax(logits).max(axis=1)
    return _vector(ids or _default_ids(len(logits)), scores, "msp")


def odin_t_score(
    logits: np.ndarray, temperature: float = DEFAULT_ODIN_T, ids: Optional[list[str]] = None
) -> ScoreVector:
    """Maximum softmax probability of temperature-scaled logits."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite("odin", logits)
    inner = msp_score(logits / temperature, ids)
    return _vector(inner.ids, inner.scores, "odin", temperature=temperature)


def energy_score(
    logits: np.ndarray, temperature: float = 1.0, ids: Optional[list[str]] = None
) -> ScoreVector:
    """Temperature-scaled log-sum-exp of the logits."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite("energy", logits)
    scores = temperature * logsumexp(logits / temperature)
    return _vector(ids or _default_ids(len(logits)), scores, "energy", temperature=temperature)


def _default_ids(n: int) -> list[str]:
    return [f"s{i:06d}" for i in range(n)]


# --- feature-distance scorers -----------------------------------------------

@dataclass
class MdsModel:
    """Class means and the shared inverse covariance of the training features."""

    class_means: np.ndarray  # (C, d)
    shared_precision: np.ndarray  # (d, d)
    reg_epsilon: float


def mds_fit(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    reg_epsilon: Optional[float] = None,
) -> MdsModel:
    """Per-class means plus a pooled, regularized covariance, inverted once."""
    X = np.asarray(train_features, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    classes = np.unique(y)
    d = X.shape[1]
    means = np.zeros((len(classes), d))
    pooled = np.zeros((d, d))
    for ci, c in enumerate(classes):
        Xc = X[y == c]
        if len(Xc) < 2:
            raise ValidationError(f"class {c} has {len(Xc)} samples; need >= 2")
        means[ci] = Xc.mean(axis=0)
        centered = Xc - means[ci]
        pooled += centered.T @ centered
    pooled /= len(X)
    if reg_epsilon is None:
        reg_epsilon = 1e-6 * float(np.trace(pooled)) / d
    pooled += reg_epsilon * np.eye(d)
    try:
        np.linalg.cholesky(pooled)
        precision = np.linalg.inv(pooled)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"pooled covariance singular even after regularization: {exc}") from exc
    precision = (precision + precision.T) / 2.0
    return MdsModel(class_means=means, shared_precision=precision, reg_epsilon=float(reg_epsilon))


def mds_score(model: MdsModel, features: np.ndarray, ids: Optional[list[str]] = None) -> ScoreVector:
    """Negated minimum squared Mahalanobis distance to any class mean."""
    X = np.asarray(features, dtype=np.float64)
    dists = np.empty((X.shape[0], model.class_means.shape[0]))
    for ci in range(model.class_means.shape[0]):
        diff = X - model.class_means[ci]
        dists[:, ci] = np.einsum("ij,jk,ik->i", diff, model.shared_precision, diff)
    scores = -dists.min(axis=1)
    return _vector(ids or _default_ids(len(X)), scores, "mds", reg_epsilon=model.reg_epsilon)


def knn_score(
    train_features: np.ndarray,
    test_features: np.ndarray,
    k: int = DEFAULT_KNN_K,
    ids: Optional[list[str]] = None,
) -> ScoreVector:
    """Negated Euclidean distance to the k-th nearest unit-normalized
    training feature."""
    train = np.asarray(train_features, dtype=np.float64)
    test = np.asarray(test_features, dtype=np.float64)
    if not (1 <= k <= train.shape[0]):
        raise ValidationError(f"k={k} outside 1..{train.shape[0]}")
    tn = train / np.linalg.norm(train, axis=1, keepdims=True)
    qn = test / np.linalg.norm(test, axis=1, keepdims=True)
    scores = np.empty(test.shape[0])
    block = 2048
    sq_train = np.einsum("ij,ij->i", tn, tn)
    for s in range(0, test.shape[0], block):
        q = qn[s : s + block]
        d2 = np.maximum(
            np.einsum("ij,ij->i", q, q)[:, None] + sq_train[None, :] - 2.0 * (q @ tn.T),
            0.0,
        )
        scores[s : s + q.shape[0]] = -np.sqrt(np.partition(d2, k - 1, axis=1)[:, k - 1])
    return _vector(ids or _default_ids(len(test)), scores, "knn", k=k)


# --- head-gradient and masked-logit scorers ----------------------------------

def gradnorm_score(
    features: np.ndarray,
    fc_weights: np.ndarray,
    fc_bias: np.ndarray,
    temperature: float = 1.0,
    ids: Optional[list[str]] = None,
) -> ScoreVector:
    """L1 norm of the final-layer weight gradient of the KL divergence from a
    uniform target to the softmax prediction.

    The gradient is the outer product (p - 1/C) f^T, so its entrywise L1 norm
    factorizes into ||p - 1/C||_1 * ||f||_1.
    """
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    X = np.asarray(features, dtype=np.float64)
    logits = compute_logits(X, np.asarray(fc_weights, dtype=np.float64),
                            np.asarray(fc_bias, dtype=np.float64))
    _check_finite("gradnorm", logits)
    p = softmax(logits / temperature)
    n_classes = logits.shape[1]
    scores = np.abs(p - 1.0 / n_classes).sum(axis=1) * np.abs(X).sum(axis=1)
    return _vector(ids or _default_ids(len(X)), scores, "gradnorm",
                   temperature=temperature, target="kl_to_uniform")


def dice_mask(fc_weights: np.ndarray, train_feature_mean: np.ndarray, sparsity_p: float) -> np.ndarray:
    """Boolean keep-mask over the head weights: the lowest-contribution
    fraction ``sparsity_p`` (weight times mean training activation, ranked
    globally) is dropped."""
    if not (0.0 <= sparsity_p < 1.0):
        raise ValidationError(f"sparsity_p must be in [0, 1), got {sparsity_p}")
    contribution = np.asarray(fc_weights, dtype=np.float64) * np.asarray(
        train_feature_mean, dtype=np.float64
    )[None, :]
    n_drop = int(sparsity_p * contribution.size)
    mask = np.ones(contribution.size, dtype=bool)
    if n_drop > 0:
        order = np.argsort(contribution.ravel(), kind="stable")
        mask[order[:n_drop]] = False
    return mask.reshape(contribution.shape)


def dice_score(
    features: np.ndarray,
    fc_weights: np.ndarray,
    fc_bias: np.ndarray,
    sparsity_p: float = DEFAULT_DICE_P,
    train_feature_mean: Optional[np.ndarray] = None,
    ids: Optional[list[str]] = None,
) -> ScoreVector:
    """Energy of the logits recomputed with only the salient head weights."""
    if train_feature_mean is None:
        raise ValidationError("dice requires the mean training feature (fit input)")
    X = np.asarray(features, dtype=np.float64)
    W = np.asarray(fc_weights, dtype=np.float64)
    mask = dice_mask(W, train_feature_mean, sparsity_p)
    logits = compute_logits(X, W * mask, np.asarray(fc_bias, dtype=np.float64))
    inner = energy_score(logits, ids=ids)
    return _vector(inner.ids, inner.scores, "dice", sparsity_p=sparsity_p)


def ash_prune(features: np.ndarray, prune_percentile: float, variant: str = "prune") -> np.ndarray:
    """Zero each sample's activations below its own percentile threshold;
    the ``scale`` variant rescales survivors to preserve the row's L1 sum."""
    if not (0.0 <= prune_percentile < 1.0):
        raise ValidationError(f"prune_percentile must be in [0, 1), got {prune_percentile}")
    if variant not in ("prune", "scale"):
        raise ValidationError(f"unknown ash variant {variant!r}")
    X = np.asarray(features, dtype=np.float64)
    if variant == "scale" and np.any(X < 0):
        raise ValidationError("ash scale variant requires non-negative activations")
    thresholds = np.quantile(X, prune_percentile, axis=1, keepdims=True)
    pruned = np.where(X < thresholds, 0.0, X)
    if variant == "scale":
        before = X.sum(axis=1, keepdims=True)
        after = pruned.sum(axis=1, keepdims=True)
        scale = np.divide(before, after, out=np.ones_like(before), where=after != 0.0)
        pruned = pruned * scale
    return pruned


def ash_score(
    features: np.ndarray,
    fc_weights: np.ndarray,
    fc_bias: np.ndarray,
    prune_percentile: float = DEFAULT_ASH_PERCENTILE,
    variant: str = "prune",
    ids: Optional[list[str]] = None,
) -> ScoreVector:
    """Energy of the logits recomputed from percentile-pruned activations."""
    pruned = ash_prune(features, prune_percentile, variant)
    logits = compute_logits(pruned, np.asarray(fc_weights, dtype=np.float64),
                            np.asarray(fc_bias, dtype=np.float64))
    inner = energy_score(logits, ids=ids)
    return _vector(inner.ids, inner.scores, "ash",
                   prune_percentile=prune_percentile, variant=variant)


# --- rank-1 feature removal ---------------------------------------------------

def top_singular_triplet(
    X: np.ndarray,
    tol: float = POWER_ITER_TOL,
    max_iter: int = POWER_ITER_MAX,
    seed: int = 0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Leading singular triplet (sigma, u, v) of X by power iteration on
    X^T X with a fixed seeded start vector.

    Convergence is judged by the eigenpair residual ||X^T X v - sigma^2 v||
    <= tol * sigma^2, which bounds the eigenvalue error directly instead of
    just detecting stagnation, so a small spectral gap cannot fake
    convergence.
    """
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(X.shape[1])
    v /= np.linalg.norm(v)
    residual = np.inf
    for iteration in range(1, max_iter + 1):
        w = X.T @ (X @ v)
        sigma_sq = float(v @ w)
        if sigma_sq <= 0.0:
            # v landed in the null space; any unit v works, sigma is 0.
            return 0.0, np.zeros(X.shape[0]), v
        residual = float(np.linalg.norm(w - sigma_sq * v))
        if residual <= tol * sigma_sq:
            sigma = float(np.sqrt(sigma_sq))
            u = X @ v / sigma
            return sigma, u, v
        v = w / np.linalg.norm(w)
    raise NumericalError(
        f"power iteration did not converge in {max_iter} iterations "
        f"(last residual {residual:.3e})"
    )


def rankfeat_score(
    features_batch: np.ndarray,
    fc_weights: np.ndarray,
    fc_bias: np.ndarray,
    ids: Optional[list[str]] = None,
    seed: int = 0,
) -> ScoreVector:
    """Remove the batch feature matrix's dominant rank-1 component, recompute
    logits from the residual, and keep the per-row maximum logit.

    Batch-coupled: the whole batch must be scored together.
    """
    X = np.asarray(features_batch, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValidationError("rankfeat needs a batch of at least 2 rows")
    sigma, u, v = top_singular_triplet(X, seed=seed)
    residual = X - sigma * np.outer(u, v)
    logits = compute_logits(residual, np.asarray(fc_weights, dtype=np.float64),
                            np.asarray(fc_bias, dtype=np.float64))
    scores = logits.max(axis=1)
    return _vector(ids or _default_ids(len(X)), scores, "rankfeat", seed=seed)


# --- dispatcher ---------------------------------------------------------------

def score_outputs(
    outputs: ClassifierOutputs,
    method: str,
    params: Optional[dict] = None,
    fit_outputs: Optional[ClassifierOutputs] = None,
) -> ScoreVector:
    """Run one named scorer over a classifier-output bundle.

    ``fit_outputs`` supplies training statistics for the feature-space methods
    (class means/covariance, neighbor base, activation means); it defaults to
    the bundle being scored.
    """
    params = dict(params or {})
    fit = fit_outputs if fit_outputs is not None else outputs
    ids = outputs.ids

    if method == "msp":
        return msp_score(outputs.logits, ids=ids)
    if method == "odin":
        return odin_t_score(outputs.logits, float(params.get("temperature", DEFAULT_ODIN_T)), ids=ids)
    if method == "energy":
        return energy_score(outputs.logits, float(params.get("temperature", 1.0)), ids=ids)
    if method == "mds":
        model = mds_fit(fit.features, _fit_labels(fit), params.get("reg_epsilon"))
        return mds_score(model, outputs.features, ids=ids)
    if method == "knn":
        return knn_score(fit.features, outputs.features, int(params.get("k", DEFAULT_KNN_K)), ids=ids)
    if method == "gradnorm":
        return gradnorm_score(outputs.features, outputs.fc_weights, outputs.fc_bias,
                              float(params.get("temperature", 1.0)), ids=ids)
    if method == "dice":
        return dice_score(
            outputs.features, outputs.fc_weights, outputs.fc_bias,
            float(params.get("sparsity_p", DEFAULT_DICE_P)),
            train_feature_mean=np.asarray(fit.features, dtype=np.float64).mean(axis=0),
            ids=ids,
        )
    if method == "ash":
        return ash_score(
            outputs.features, outputs.fc_weights, outputs.fc_bias,
            float(params.get("prune_percentile", DEFAULT_ASH_PERCENTILE)),
            str(params.get("variant", "prune")),
            ids=ids,
        )
    if method == "rankfeat":
        return rankfeat_score(outputs.features, outputs.fc_weights, outputs.fc_bias,
                              ids=ids, seed=int(params.get("seed", 0)))
    raise ValidationError(f"unknown scorer {method!r}; known: {', '.join(SCORER_NAMES)}")


def _fit_labels(fit: ClassifierOutputs) -> np.ndarray:
    """Class labels for fitting: the sidecar's label_ids when present,
    otherwise the head's own predictions."""
    if fit.label_ids and any(lid is not None for lid in fit.label_ids):
        if any(lid is None for lid in fit.label_ids):
            raise ValidationError("fit outputs mix labeled and unlabeled records")
        return np.array(fit.label_ids, dtype=np.int64)
    return np.argmax(fit.logits, axis=1)
