import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protossl.numcore import (
    DomainError, Rng, cosine_sim, cosine_sim_matrix, load_tensors, matmul_rows, row_normalize,
    save_tensors, seeded_choice, seeded_shuffle, zscore_apply, zscore_fit_apply,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vec = arrays(np.float64, 5, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_cosine_examples():
    assert cosine_sim(np.array([3.0, 4.0]), np.array([4.0, 3.0])) == pytest.approx(0.96, abs=1e-15)
    assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0


def test_cosine_zero_vector_names_operand():
    with pytest.raises(DomainError, match="v"):
        cosine_sim(np.ones(3), np.zeros(3))
    with pytest.raises(DomainError, match="u"):
        cosine_sim(np.zeros(3), np.ones(3))


@given(vec, st.floats(1e-3, 1e3))
def test_cosine_self_and_scale(u, alpha):
    assert abs(cosine_sim(u, u) - 1.0) <= 1e-12
    assert abs(cosine_sim(u, -u) + 1.0) <= 1e-12
    v = np.arange(5.0) + 1
    assert abs(cosine_sim(alpha * u, v) - cosine_sim(u, v)) <= 1e-12


def test_cosine_matrix_bounds_and_agreement():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
    S = cosine_sim_matrix(a, b)
    assert S.shape == (6, 3)
    assert np.all(np.abs(S) <= 1.0)
    assert S[2, 1] == pytest.approx(cosine_sim(a[2], b[1]), abs=1e-12)


def test_row_normalize_floor():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    n = row_normalize(x)
    assert np.allclose(n[0], [0.6, 0.8])
    assert np.all(n[1] == 0.0)


def test_matmul_rows_single_row_matches_batched():
    rng = np.random.default_rng(1)
    X, W = rng.normal(size=(7, 60)), rng.normal(size=(60, 64))
    full = matmul_rows(X, W)
    for i in range(7):
        assert np.array_equal(matmul_rows(X[i:i + 1], W)[0], full[i])


def test_zscore_examples():
    z, m, s = zscore_fit_apply(np.array([[0.0], [2.0]]), np.array([[0.0], [2.0]]))
    assert z.ravel().tolist() == [-1.0, 1.0]
    z, _, _ = zscore_fit_apply(np.array([[5.0], [5.0], [5.0]]), np.array([[5.0], [5.0], [5.0]]))
    assert np.all(z == 0.0)
    train = np.array([[1.0, 2.0], [3.0, 6.0]])
    _, m, s = zscore_fit_apply(train, train)
    assert np.all(zscore_apply(m[None], m, s) == 0.0)


@settings(max_examples=50)
@given(arrays(np.float64, (8, 3), elements=st.floats(-100, 100)))
def test_zscore_self_standardises(train):
    z, _, s = zscore_fit_apply(train, train)
    live = s > 1e-6
    assert np.all(np.abs(z[:, live].mean(axis=0)) < 1e-9)
    assert np.allclose(z[:, live].std(axis=0), 1.0, atol=1e-9)
    # constant columns map to (numerically) zero rather than blowing up
    assert np.all(np.abs(z[:, s < 1e-12]) < 1e-3)


def test_zscore_column_mismatch():
    with pytest.raises(DomainError):
        zscore_fit_apply(np.ones((3, 2)), np.ones((3, 3)))


def test_rng_determinism_and_streams():
    a = seeded_shuffle(Rng(7, "x"), 100)
    assert np.array_equal(a, seeded_shuffle(Rng(7, "x"), 100))
    assert not np.array_equal(a, seeded_shuffle(Rng(8, "x"), 100))
    assert not np.array_equal(a, seeded_shuffle(Rng(7, "y"), 100))
    assert seeded_shuffle(Rng(0), 1).tolist() == [0]
    assert seeded_choice(Rng(0), 1) == 0
    # a child stream does not depend on whether siblings were used first
    r = Rng(3)
    r.child("a").normal(size=10)
    assert np.array_equal(r.child("b").normal(size=4), Rng(3).child("b").normal(size=4))


@pytest.mark.parametrize("fn", [seeded_shuffle, seeded_choice])
def test_rng_domain_errors(fn):
    with pytest.raises(DomainError):
        fn(Rng(0), 0)


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_tensor_roundtrip(tmp_path, dtype):
    rng = np.random.default_rng(2)
    tensors = {"b": rng.normal(size=(3, 4)), "a": rng.normal(size=(5,))}
    save_tensors(tmp_path / "t", tensors, {"note": "x"}, dtype=dtype)
    back, meta = load_tensors(tmp_path / "t")
    cast = np.float32 if dtype == "f32" else np.float64
    for k, v in tensors.items():
        assert np.array_equal(back[k], v.astype(cast).astype(np.float64))
    assert meta["note"] == "x"
    man = json.loads((tmp_path / "t" / "manifest.json").read_text())
    offsets = [t["offset"] for t in man["tensors"]]
    assert offsets == sorted(offsets)
    # rewriting identical content gives identical bytes
    first = (tmp_path / "t" / "data.bin").read_bytes()
    save_tensors(tmp_path / "t", tensors, {"note": "x"}, dtype=dtype)
    assert (tmp_path / "t" / "data.bin").read_bytes() == first
