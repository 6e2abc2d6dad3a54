import math

import numpy as np
import pytest

from conftest import random_orthogonal
from isood.errors import NumericalError, ValidationError
from isood.scorers import (
    MdsModel,
    ash_score,
    compute_logits,
    dice_score,
    energy_score,
    gradnorm_score,
    knn_score,
    mds_fit,
    mds_score,
    msp_score,
    odin_t_score,
    rankfeat_score,
    read_scores,
    score_outputs,
    top_singular_triplet,
    write_scores,
)
from isood.store import ClassifierOutputs


# --- msp / odin / energy -------------------------------------------------------

def test_msp_uniform_logits():
    sv = msp_score(np.array([[0.0, 0.0, 0.0, 0.0]]))
    assert sv.scores[0] == pytest.approx(0.25, abs=1e-12)


def test_msp_saturated():
    sv = msp_score(np.array([[100.0, 0.0]]))
    assert sv.scores[0] == pytest.approx(1.0, abs=1e-12)


def test_msp_direct_evaluation():
    # independent direct evaluation of softmax max for logits [1, 2, 3]
    expected = math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3))
    sv = msp_score(np.array([[1.0, 2.0, 3.0]]))
    assert sv.scores[0] == pytest.approx(expected, abs=1e-12)
    assert sv.scores[0] == pytest.approx(0.66524, abs=1e-5)


def test_msp_rejects_nonfinite():
    with pytest.raises(ValidationError):
        msp_score(np.array([[np.inf, 0.0]]))


def test_odin_temperature_one_reduces_to_msp(rng):
    logits = rng.standard_normal((10, 5))
    assert np.array_equal(odin_t_score(logits, 1.0).scores, msp_score(logits).scores)


def test_odin_high_temperature_limit(rng):
    logits = rng.standard_normal((10, 5))
    sv = odin_t_score(logits, 1e9)
    assert np.allclose(sv.scores, 0.2, atol=1e-6)


def test_odin_direct_evaluation():
    # logits [2, 0] at T=2 -> softmax of [1, 0]
    expected = math.exp(1) / (math.exp(1) + 1)
    sv = odin_t_score(np.array([[2.0, 0.0]]), 2.0)
    assert sv.scores[0] == pytest.approx(expected, abs=1e-12)
    assert sv.scores[0] == pytest.approx(0.73106, abs=1e-5)


def test_odin_rejects_bad_temperature():
    with pytest.raises(ValidationError):
        odin_t_score(np.zeros((1, 2)), 0.0)


def test_energy_closed_form():
    sv = energy_score(np.array([[0.0, 0.0]]))
    assert sv.scores[0] == pytest.approx(math.log(2), abs=1e-12)


def test_energy_shift_equivariance(rng):
    logits = rng.standard_normal((6, 4))
    base = energy_score(logits).scores
    shifted = energy_score(logits + 3.7).scores
    assert np.allclose(shifted, base + 3.7, atol=1e-12)


def test_energy_direct_evaluation():
    expected = math.log(math.exp(1) + math.exp(2) + math.exp(3))
    sv = energy_score(np.array([[1.0, 2.0, 3.0]]))
    assert sv.scores[0] == pytest.approx(expected, abs=1e-12)
    assert sv.scores[0] == pytest.approx(3.40761, abs=1e-5)


def test_msp_odin_invariant_to_row_constant(rng):
    logits = rng.standard_normal((8, 5))
    shift = rng.standard_normal((8, 1))
    assert np.allclose(msp_score(logits + shift).scores, msp_score(logits).scores, atol=1e-12)
    assert np.allclose(odin_t_score(logits + shift, 50.0).scores,
                       odin_t_score(logits, 50.0).scores, atol=1e-12)


# --- mahalanobis ------------------------------------------------------------------

def test_mds_score_zero_at_class_mean(rng):
    X = rng.standard_normal((40, 5))
    y = rng.integers(0, 3, 40)
    model = mds_fit(X, y)
    mean0 = model.class_means[0]
    sv = mds_score(model, mean0[None, :])
    assert sv.scores[0] == pytest.approx(0.0, abs=1e-10)


def test_mds_isotropic_closed_form():
    model = MdsModel(class_means=np.array([[1.0, 0.0], [-1.0, 0.0]]),
                     shared_precision=np.eye(2), reg_epsilon=0.0)
    sv = mds_score(model, np.zeros((1, 2)))
    assert sv.scores[0] == pytest.approx(-1.0, abs=1e-12)


def test_mds_matches_textbook_recomputation(rng):
    X = rng.standard_normal((100, 4))
    y = rng.integers(0, 2, 100)
    y[:2] = [0, 1]  # both classes populated
    model = mds_fit(X, y)
    sv = mds_score(model, X)
    # independent recomputation: explicit per-class loops and solves
    means = [X[y == c].mean(axis=0) for c in (0, 1)]
    pooled = np.zeros((4, 4))
    for c in (0, 1):
        centered = X[y == c] - means[c]
        pooled += centered.T @ centered
    pooled /= len(X)
    pooled += model.reg_epsilon * np.eye(4)
    for i in range(len(X)):
        expected = -min(
            float((X[i] - means[c]) @ np.linalg.solve(pooled, X[i] - means[c]))
            for c in (0, 1)
        )
        assert sv.scores[i] == pytest.approx(expected, abs=1e-8)


def test_mds_requires_two_samples_per_class(rng):
    X = rng.standard_normal((3, 2))
    with pytest.raises(ValidationError, match="need >= 2"):
        mds_fit(X, np.array([0, 0, 1]))


def test_mds_singular_covariance_without_regularization():
    X = np.zeros((8, 3))
    y = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=np.int64)
    X[4:, 0] = 1.0
    with pytest.raises(NumericalError):
        mds_fit(X, y, reg_epsilon=0.0)


def test_mds_invariant_under_orthogonal_basis_change(rng):
    X = rng.standard_normal((60, 5))
    y = rng.integers(0, 3, 60)
    Q = random_orthogonal(5, rng)
    test = rng.standard_normal((10, 5))
    base = mds_score(mds_fit(X, y, reg_epsilon=1e-8), test).scores
    rotated = mds_score(mds_fit(X @ Q, y, reg_epsilon=1e-8), test @ Q).scores
    assert np.allclose(base, rotated, atol=1e-6)


# --- knn --------------------------------------------------------------------------

def test_knn_self_distance_zero(rng):
    train = rng.standard_normal((20, 4))
    sv = knn_score(train, train[:1], k=1)
    assert sv.scores[0] == pytest.approx(0.0, abs=1e-9)


def test_knn_orthonormal_closed_form():
    train = np.eye(2)
    sv = knn_score(train, np.array([[1.0, 0.0]]), k=2)
    assert sv.scores[0] == pytest.approx(-math.sqrt(2), abs=1e-12)


def test_knn_matches_brute_force(rng):
    train = rng.standard_normal((5000, 8))
    test = rng.standard_normal((500, 8))
    k = 50
    sv = knn_score(train, test, k=k)
    tn = train / np.linalg.norm(train, axis=1, keepdims=True)
    qn = test / np.linalg.norm(test, axis=1, keepdims=True)
    for i in range(len(test)):
        dists = np.sort(np.linalg.norm(tn - qn[i], axis=1))
        assert sv.scores[i] == pytest.approx(-dists[k - 1], abs=1e-9)


def test_knn_k_out_of_range(rng):
    with pytest.raises(ValidationError):
        knn_score(rng.standard_normal((5, 3)), rng.standard_normal((2, 3)), k=6)


# --- gradnorm ----------------------------------------------------------------------

def _kl_to_uniform(logits):
    n_classes = logits.shape[-1]
    z = logits - logits.max()
    log_q = z - math.log(np.sum(np.exp(z)))
    return -math.log(n_classes) - float(np.mean(log_q))


def test_gradnorm_zero_at_uniform_prediction():
    features = np.array([[1.0, 2.0, 3.0]])
    fc_weights = np.zeros((4, 3))
    fc_bias = np.zeros(4)
    sv = gradnorm_score(features, fc_weights, fc_bias)
    assert sv.scores[0] == pytest.approx(0.0, abs=1e-12)


def test_gradnorm_matches_weight_perturbation(rng):
    # independent oracle: central finite differences on each head weight
    for _ in range(4):
        d, n_classes = 6, 4
        f = rng.standard_normal(d)
        W = rng.standard_normal((n_classes, d))
        b = rng.standard_normal(n_classes)
        sv = gradnorm_score(f[None, :], W, b, temperature=1.0)
        step = 1e-4
        grad = np.zeros_like(W)
        for c in range(n_classes):
            for j in range(d):
                for sign in (+1, -1):
                    Wp = W.copy()
                    Wp[c, j] += sign * step
                    grad[c, j] += sign * _kl_to_uniform(f @ Wp.T + b)
        grad /= 2 * step
        expected = np.sum(np.abs(grad))
        assert abs(sv.scores[0] - expected) / expected <= 1e-5


def test_gradnorm_scales_linearly_with_feature_l1(rng):
    d, n_classes = 5, 3
    f = np.abs(rng.standard_normal(d))
    W = np.zeros((n_classes, d))  # keeps p fixed at uniform-independent... p from logits=b
    b = rng.standard_normal(n_classes)
    s1 = gradnorm_score(f[None, :], W, b).scores[0]
    s2 = gradnorm_score(2 * f[None, :], W, b).scores[0]
    assert s2 == pytest.approx(2 * s1, rel=1e-12)


# --- dice -------------------------------------------------------------------------

def test_dice_zero_sparsity_equals_energy(rng):
    f = rng.standard_normal((7, 5))
    W = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    mean = rng.standard_normal(5)
    dice = dice_score(f, W, b, sparsity_p=0.0, train_feature_mean=mean)
    energy = energy_score(compute_logits(f, W, b))
    assert np.array_equal(dice.scores, energy.scores)


def test_dice_forced_ranking_masks_known_half():
    W = np.array([[1.0, 1.0], [1.0, 1.0]])
    mean = np.array([1.0, -1.0])  # contributions: col0 = +1, col1 = -1
    f = np.array([[2.0, 3.0]])
    sv = dice_score(f, W, np.zeros(2), sparsity_p=0.5, train_feature_mean=mean)
    masked_logits = f @ np.array([[1.0, 0.0], [1.0, 0.0]]).T  # col1 dropped
    expected = energy_score(masked_logits).scores
    assert np.array_equal(sv.scores, expected)


def test_dice_matches_explicit_mask(rng):
    d, n_classes = 20, 6
    f = rng.standard_normal((9, d))
    W = rng.standard_normal((n_classes, d))
    b = rng.standard_normal(n_classes)
    mean = rng.standard_normal(d)
    p = 0.7
    sv = dice_score(f, W, b, sparsity_p=p, train_feature_mean=mean)
    contribution = W * mean[None, :]
    order = np.argsort(contribution.ravel(), kind="stable")
    mask = np.ones(W.size)
    mask[order[: int(p * W.size)]] = 0.0
    expected = energy_score(compute_logits(f, W * mask.reshape(W.shape), b)).scores
    assert np.array_equal(sv.scores, expected)


def test_dice_requires_feature_mean(rng):
    with pytest.raises(ValidationError, match="mean"):
        dice_score(np.ones((1, 2)), np.ones((2, 2)), np.zeros(2), 0.5, train_feature_mean=None)


# --- ash ---------------------------------------------------------------------------

def test_ash_zero_percentile_equals_energy(rng):
    f = np.abs(rng.standard_normal((7, 5)))
    W = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    for variant in ("prune", "scale"):
        ash = ash_score(f, W, b, prune_percentile=0.0, variant=variant)
        energy = energy_score(compute_logits(f, W, b))
        assert np.array_equal(ash.scores, energy.scores)


def test_ash_sparse_row_unchanged():
    f = np.array([[1.0, 0.0, 0.0, 0.0]])
    W = np.eye(4)
    b = np.zeros(4)
    sv = ash_score(f, W, b, prune_percentile=0.5, variant="prune")
    expected = energy_score(compute_logits(f, W, b)).scores
    assert np.array_equal(sv.scores, expected)


def test_ash_matches_threshold_scan(rng):
    d, n_classes = 12, 5
    f = np.abs(rng.standard_normal((100, d)))
    W = rng.standard_normal((n_classes, d))
    b = rng.standard_normal(n_classes)
    pct = 0.6
    for variant in ("prune", "scale"):
        sv = ash_score(f, W, b, prune_percentile=pct, variant=variant)
        for i in range(len(f)):
            thr = np.quantile(f[i], pct)
            kept = np.where(f[i] < thr, 0.0, f[i])
            if variant == "scale" and kept.sum() > 0:
                kept = kept * (f[i].sum() / kept.sum())
            expected = energy_score((kept @ W.T + b)[None, :]).scores[0]
            assert sv.scores[i] == pytest.approx(expected, abs=1e-12)


def test_ash_scale_rejects_negative_activations(rng):
    f = rng.standard_normal((3, 4))
    f[0, 0] = -1.0
    with pytest.raises(ValidationError, match="non-negative"):
        ash_score(f, np.ones((2, 4)), np.zeros(2), 0.5, variant="scale")


# --- rankfeat ------------------------------------------------------------------------

def test_rankfeat_annihilates_rank_one_batch(rng):
    u = rng.standard_normal(10)
    v = rng.standard_normal(6)
    X = np.outer(u, v)
    W = rng.standard_normal((4, 6))
    b = rng.standard_normal(4)
    sv = rankfeat_score(X, W, b)
    assert np.allclose(sv.scores, b.max(), atol=1e-6)


def test_power_iteration_matches_dense_svd(rng):
    for _ in range(50):
        X = rng.standard_normal((16, 8))
        sigma, _, _ = top_singular_triplet(X)
        expected = np.linalg.svd(X, compute_uv=False)[0]
        assert abs(sigma - expected) / expected <= 1e-5


def test_rankfeat_residual_orthogonal_to_top_component(rng):
    X = rng.standard_normal((20, 7))
    sigma, u, v = top_singular_triplet(X)
    residual = X - sigma * np.outer(u, v)
    assert abs(np.sum(residual * np.outer(u, v))) <= 1e-5 * sigma


def test_rankfeat_requires_batch(rng):
    with pytest.raises(ValidationError, match="at least 2"):
        rankfeat_score(np.ones((1, 3)), np.ones((2, 3)), np.zeros(2))


def test_power_iteration_reports_nonconvergence(rng):
    # a narrow-but-nonzero top gap decays the residual too slowly for the
    # iteration budget; exact ties, by contrast, converge immediately
    q1 = random_orthogonal(20, rng)
    q2 = random_orthogonal(8, rng)
    spectrum = np.array([1.0, 1.0 - 5e-4, 0.5, 0.3, 0.2, 0.1, 0.05, 0.01])
    X = q1[:, :8] @ np.diag(spectrum) @ q2
    with pytest.raises(NumericalError, match="did not converge"):
        top_singular_triplet(X, max_iter=200)


# --- orientation and dispatch ----------------------------------------------------------

def planted_outputs(rng, n=60, ood=False):
    n_classes, d = 3, 8
    W = 3.0 * np.eye(n_classes, d).astype(np.float64)  # axes 3.. carry no weight
    labels = rng.integers(0, n_classes, n)
    feats = 0.5 + 0.1 * rng.standard_normal((n, d))
    if ood:
        feats[:, 5] += 3.0  # mass moves to a dead axis: logits drop, distance grows
    else:
        feats[np.arange(n), labels] += 3.0
    feats = np.maximum(feats, 0.0).astype(np.float32)
    W = W.astype(np.float32)
    b = np.zeros(n_classes, dtype=np.float32)
    logits = (feats @ W.T + b).astype(np.float32)
    prefix = "ood" if ood else "id"
    return ClassifierOutputs(ids=[f"{prefix}{i}" for i in range(n)], features=feats,
                             logits=logits, fc_weights=W, fc_bias=b,
                             label_ids=[int(c) for c in labels])


@pytest.mark.parametrize("method", ["msp", "odin", "energy", "mds", "knn",
                                    "gradnorm", "dice", "ash", "rankfeat"])
def test_orientation_id_scores_above_ood(method, rng):
    id_outputs = planted_outputs(rng, n=80, ood=False)
    ood_outputs = planted_outputs(rng, n=80, ood=True)
    params = {"k": 10} if method == "knn" else {}
    id_sv = score_outputs(id_outputs, method, params, fit_outputs=id_outputs)
    ood_sv = score_outputs(ood_outputs, method, params, fit_outputs=id_outputs)
    assert id_sv.scores.mean() > ood_sv.scores.mean()


def test_dispatch_unknown_method(rng):
    with pytest.raises(ValidationError, match="unknown scorer"):
        score_outputs(planted_outputs(rng), "nope")


def test_scores_round_trip(tmp_path, rng):
    sv = msp_score(rng.standard_normal((10, 4)), ids=[f"s{i}" for i in range(10)])
    path = tmp_path / "scores.jsonl"
    write_scores(sv, path)
    loaded = read_scores(path)
    assert loaded.ids == sv.ids
    assert np.array_equal(loaded.scores, sv.scores)
    assert loaded.scorer_name == "msp"
