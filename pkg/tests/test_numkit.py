import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vitmerge import DimensionError, SingularSystemError
from vitmerge.numkit import cosine_similarity, matmul, softmax, solve


def triple_loop(a, b):
    r, k = len(a), len(a[0])
    c = len(b[0])
    out = [[0.0] * c for _ in range(r)]
    for i in range(r):
        for j in range(c):
            s = 0.0
            for t in range(k):
                s += float(a[i][t]) * float(b[t][j])
            out[i][j] = s
    return np.array(out)


def test_matmul_identity():
    assert np.array_equal(matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]]), [[3, 4], [5, 6]])


def test_matmul_row_by_column():
    assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    ref = triple_loop(a, b)
    assert np.linalg.norm(matmul(a, b) - ref) / np.linalg.norm(ref) <= 1e-12


def test_matmul_accumulates_in_float64():
    a = np.ones((1, 3), dtype=np.float32)
    assert matmul(a, a.T).dtype == np.float64


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = rng.standard_normal((4, 6)), rng.standard_normal((6, 5)), rng.standard_normal((5, 3))
        lhs, rhs = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) <= 1e-10


def test_solve_identity():
    b = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(solve(np.eye(3), b), b)


def test_solve_diagonal():
    np.testing.assert_allclose(solve([[2, 0], [0, 4]], [[2], [8]]), [[1], [2]], rtol=0, atol=1e-15)


def test_solve_spd_against_explicit_inverse():
    rng = np.random.default_rng(2)
    m = rng.standard_normal((6, 6))
    a = m @ m.T + 6 * np.eye(6)
    b = rng.standard_normal((6, 4))
    x = solve(a, b)
    assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) <= 1e-8
    np.testing.assert_allclose(x, np.linalg.inv(a) @ b, rtol=1e-8, atol=1e-12)


def test_solve_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(10):
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        a = q @ np.diag(rng.uniform(1, 3, 5)) @ q.T
        w = rng.standard_normal((5, 3))
        np.testing.assert_allclose(solve(a, matmul(a, w)), w, rtol=1e-8, atol=1e-10)


def test_solve_ridge_fallback_on_singular():
    a = np.array([[1.0, 1.0], [1.0, 1.0]])
    res = solve(a, np.array([[2.0], [2.0]]), full_output=True)
    assert res.regularized
    np.testing.assert_allclose(a @ res.x, [[2.0], [2.0]], rtol=1e-5)
    assert not solve(np.eye(2), np.ones((2, 1)), full_output=True).regularized


def test_solve_still_singular_raises():
    with pytest.raises(SingularSystemError):
        solve(np.zeros((3, 3)), np.ones((3, 1)))


def test_solve_shape_errors():
    with pytest.raises(DimensionError):
        solve(np.ones((2, 3)), np.ones((2, 1)))
    with pytest.raises(DimensionError):
        solve(np.eye(2), np.ones((3, 1)))


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_no_overflow():
    p = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0) and p[1] < 1e-300


def test_softmax_direct_formula():
    x = [1.0, 2.0, 3.0]
    e = [math.exp(v - 3.0) for v in x]
    ref = [v / sum(e) for v in e]
    np.testing.assert_allclose(softmax(np.array(x)), ref, rtol=0, atol=1e-12)


def test_softmax_empty():
    with pytest.raises(DimensionError):
        softmax(np.array([]))


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-100, 100))
def test_softmax_properties(v, c):
    p = softmax(v)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-6
    np.testing.assert_allclose(softmax(v + c), p, rtol=0, atol=1e-9)


def test_cosine_self_and_orthogonal():
    a = np.array([0.3, -1.2, 2.0])
    assert cosine_similarity(a, a) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0


def test_cosine_direct_formula():
    a, b = [1.0, 2.0, 3.0], [4.0, 5.0, 6.0]
    ref = 32.0 / (math.sqrt(14.0) * math.sqrt(77.0))
    assert abs(cosine_similarity(a, b) - ref) <= 1e-12


def test_cosine_degenerate_and_errors():
    res = cosine_similarity([0.0, 0.0], [1.0, 2.0], full_output=True)
    assert res.value == 0.0 and res.degenerate
    with pytest.raises(DimensionError):
        cosine_similarity([1.0], [1.0, 2.0])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-10, 10)), arrays(np.float64, 8, elements=st.floats(-10, 10)),
       st.floats(1e-3, 1e3))
def test_cosine_positive_scale_invariant(a, b, c):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    v = cosine_similarity(a, b)
    assert -1.0 <= v <= 1.0
    assert abs(cosine_similarity(c * a, b) - v) <= 1e-10
