import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isood.errors import (
    BadMagicError,
    MetadataMismatchError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)
from isood.store import (
    ClassifierOutputs,
    EmbeddingStore,
    normalize_store,
    read_outputs,
    read_store,
    write_outputs,
    write_store,
)


def make_store(vectors, ids=None, label_ids=None, modality="image"):
    return EmbeddingStore.from_arrays(np.asarray(vectors, dtype=np.float32),
                                      ids=ids, label_ids=label_ids, modality=modality)


def test_empty_store_is_16_byte_header_and_empty_sidecar(tmp_path):
    store = EmbeddingStore(dim=4, ids=[], label_ids=[], modalities=[],
                           vectors=np.zeros((0, 4), dtype=np.float32))
    path = tmp_path / "empty.iseb"
    write_store(store, path)
    assert path.stat().st_size == 16
    assert (tmp_path / "empty.iseb.meta.jsonl").read_text() == ""
    loaded = read_store(path)
    assert loaded.dim == 4 and loaded.count == 0


def test_round_trip_identity(tmp_path):
    rng = np.random.default_rng(0)
    store = make_store(rng.standard_normal((7, 5)), label_ids=[None, 1, 2, None, 0, 3, 1])
    path = tmp_path / "s.iseb"
    write_store(store, path)
    loaded = read_store(path)
    assert loaded == store
    assert loaded.vectors.tobytes() == store.vectors.tobytes()


def test_duplicate_ids_rejected_nothing_written(tmp_path):
    # from_arrays validates eagerly, so build the bad store by hand
    store = EmbeddingStore(dim=3, ids=["a", "a"], label_ids=[None, None],
                           modalities=["image", "image"],
                           vectors=np.ones((2, 3), dtype=np.float32))
    path = tmp_path / "dup.iseb"
    with pytest.raises(ValidationError, match="duplicate id"):
        write_store(store, path)
    assert not path.exists()


def test_read_reports_declared_dim_count(tmp_path):
    store = make_store(np.arange(12, dtype=np.float32).reshape(3, 4))
    write_store(store, tmp_path / "s.iseb")
    loaded = read_store(tmp_path / "s.iseb")
    assert (loaded.dim, loaded.count) == (4, 3)


def test_truncated_file_detected(tmp_path):
    store = make_store(np.ones((3, 4)))
    path = tmp_path / "s.iseb"
    write_store(store, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(TruncatedPayloadError):
        read_store(path)


def test_extra_bytes_detected(tmp_path):
    store = make_store(np.ones((3, 4)))
    path = tmp_path / "s.iseb"
    write_store(store, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(TruncatedPayloadError):
        read_store(path)


def test_sidecar_count_mismatch_detected(tmp_path):
    store = make_store(np.ones((3, 4)))
    path = tmp_path / "s.iseb"
    write_store(store, path)
    meta = tmp_path / "s.iseb.meta.jsonl"
    lines = meta.read_text().splitlines()
    meta.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(MetadataMismatchError, match="2 metadata lines for 3"):
        read_store(path)


def test_bad_magic_and_version_are_distinct_errors(tmp_path):
    store = make_store(np.ones((1, 2)))
    path = tmp_path / "s.iseb"
    write_store(store, path)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "m.iseb"
    corrupted = bytearray(raw)
    corrupted[:4] = b"NOPE"
    bad_magic.write_bytes(bytes(corrupted))
    with pytest.raises(BadMagicError):
        read_store(bad_magic)

    bad_version = tmp_path / "v.iseb"
    corrupted = bytearray(raw)
    corrupted[4] = 9
    bad_version.write_bytes(bytes(corrupted))
    with pytest.raises(VersionMismatchError):
        read_store(bad_version)


def test_normalize_three_four_five(tmp_path):
    store = make_store([[3.0, 4.0]])
    normed = normalize_store(store)
    assert np.allclose(normed.vectors, [[0.6, 0.8]], atol=1e-7)


def test_normalize_idempotent():
    rng = np.random.default_rng(1)
    store = normalize_store(make_store(rng.standard_normal((20, 6))))
    again = normalize_store(store)
    assert np.max(np.abs(again.vectors - store.vectors)) <= 1e-7


def test_normalize_zero_vector_names_id():
    store = make_store([[1.0, 0.0], [0.0, 0.0]], ids=["ok", "broken"])
    with pytest.raises(ValidationError, match="broken"):
        normalize_store(store)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(min_value=0, max_value=8),
    dim=st.integers(min_value=1, max_value=6),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_round_trip_preserves_float_bits(tmp_path_factory, n, dim, seed):
    rng = np.random.default_rng(seed)
    raw = rng.bytes(4 * n * dim)
    vectors = np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()
    vectors[~np.isfinite(vectors)] = 0.0  # keep metadata JSON simple; bits still arbitrary
    store = make_store(vectors)
    path = tmp_path_factory.mktemp("bits") / "s.iseb"
    write_store(store, path)
    assert read_store(path) == store


# --- classifier outputs ------------------------------------------------------

def make_outputs(n=6, d=5, n_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    features = np.abs(rng.standard_normal((n, d))).astype(np.float32)
    fc_weights = rng.standard_normal((n_classes, d)).astype(np.float32)
    fc_bias = rng.standard_normal(n_classes).astype(np.float32)
    logits = (features @ fc_weights.T + fc_bias).astype(np.float32)
    return ClassifierOutputs(
        ids=[f"x{i}" for i in range(n)],
        features=features,
        logits=logits,
        fc_weights=fc_weights,
        fc_bias=fc_bias,
        label_ids=[int(c) for c in rng.integers(0, n_classes, n)],
        model_name="toy",
    )


def test_outputs_round_trip(tmp_path):
    outputs = make_outputs()
    write_outputs(outputs, tmp_path / "out")
    loaded = read_outputs(tmp_path / "out")
    assert loaded.ids == outputs.ids
    assert np.array_equal(loaded.features, outputs.features)
    assert np.array_equal(loaded.logits, outputs.logits)
    assert np.array_equal(loaded.fc_weights, outputs.fc_weights)
    assert np.array_equal(loaded.fc_bias, outputs.fc_bias)
    assert loaded.label_ids == outputs.label_ids
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest == {"d": 5, "C": 3, "model_name": "toy"}


def test_outputs_consistency_check_fires(tmp_path):
    outputs = make_outputs()
    outputs.logits = outputs.logits + np.float32(0.01)
    with pytest.raises(ValidationError, match="disagree"):
        outputs.validate()


def test_outputs_consistency_within_tolerance_passes():
    outputs = make_outputs()
    outputs.logits = outputs.logits + np.float32(5e-4)
    outputs.validate()
