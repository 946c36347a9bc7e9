import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flexlora.errors import InvalidMatrix, RankOutOfRange, ShapeMismatch
from flexlora.lowrank import (
    as_matrix,
    error_ratios,
    frobenius_norm,
    matmul,
    numerical_rank,
    scale,
    svd,
    truncate,
    truncation_error,
    weighted_sum,
)

from oracles import jacobi_eigenvalues, tail_norm


def orth_gap(q):
    return np.max(np.abs(q.T @ q - np.eye(q.shape[1])))


# --- svd ----------------------------------------------------------------------


def test_identity():
    f = svd(np.eye(2))
    np.testing.assert_array_equal(f.sigma, [1.0, 1.0])
    np.testing.assert_allclose(f.u, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(f.v, np.eye(2), atol=1e-15)


def test_rank_one_outer_product():
    u = np.array([2.0, 0.0, 0.0])
    v = np.array([0.0, 3.0])
    f = svd(np.outer(u, v))
    np.testing.assert_allclose(f.sigma, [6.0, 0.0], atol=1e-14)


def test_sigma_matches_jacobi_eigen_oracle():
    w = np.random.default_rng(11).standard_normal((5, 4))
    expected = np.sqrt(np.maximum(jacobi_eigenvalues(w.T @ w), 0.0))
    got = svd(w).sigma
    np.testing.assert_allclose(got, expected, rtol=1e-8)


@pytest.mark.parametrize("shape", [(1, 1), (1, 7), (7, 1), (5, 4), (4, 5), (32, 32), (50, 20), (20, 50)])
def test_factor_invariants(shape):
    w = np.random.default_rng(sum(shape)).standard_normal(shape)
    f = svd(w)
    k = min(shape)
    assert f.u.shape == (shape[0], k) and f.v.shape == (shape[1], k) and f.sigma.shape == (k,)
    assert orth_gap(f.u) <= 1e-10 and orth_gap(f.v) <= 1e-10
    assert np.all(np.diff(f.sigma) <= 0) and np.all(f.sigma >= 0)
    assert frobenius_norm(f.reconstruct() - w) <= 1e-10 * frobenius_norm(w)


def test_large_square_orthonormality():
    w = np.random.default_rng(128).standard_normal((128, 128))
    f = svd(w)
    assert orth_gap(f.u) <= 1e-10 and orth_gap(f.v) <= 1e-10
    assert frobenius_norm(f.reconstruct() - w) <= 1e-10 * frobenius_norm(w)


def test_rank_deficient_completion():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((9, 2)) @ rng.standard_normal((2, 6))
    f = svd(w)
    assert orth_gap(f.u) <= 1e-10 and orth_gap(f.v) <= 1e-10
    assert np.all(f.sigma[2:] == 0.0)
    assert numerical_rank(w) == 2


def test_zero_matrix():
    f = svd(np.zeros((3, 4)))
    np.testing.assert_array_equal(f.sigma, np.zeros(3))
    assert orth_gap(f.u) <= 1e-12 and orth_gap(f.v) <= 1e-12
    np.testing.assert_array_equal(error_ratios(f), np.zeros(3))


def test_sign_convention():
    w = np.random.default_rng(4).standard_normal((6, 6))
    f = svd(w)
    for j in range(f.k):
        col = f.u[:, j]
        first = col[np.flatnonzero(np.abs(col) > 1e-12)[0]]
        assert first >= 0


def test_equal_singular_values_keep_column_order():
    f = svd(np.diag([2.0, 5.0, 2.0]))
    np.testing.assert_array_equal(f.sigma, [5.0, 2.0, 2.0])
    np.testing.assert_array_equal(np.abs(f.u[:, 1]), [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(np.abs(f.u[:, 2]), [0.0, 0.0, 1.0])


def test_bit_identical_repeats():
    w = np.random.default_rng(5).standard_normal((17, 13))
    a, b = svd(w), svd(w.copy())
    assert np.array_equal(a.u, b.u) and np.array_equal(a.sigma, b.sigma) and np.array_equal(a.v, b.v)


@pytest.mark.parametrize("bad", [np.array([[1.0, np.nan]]), np.array([[np.inf]]), np.zeros((0, 3)), np.ones(3)])
def test_invalid_input(bad):
    with pytest.raises(InvalidMatrix):
        svd(bad)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)))
def test_property_reconstruction(w):
    f = svd(w)
    norm = frobenius_norm(w)
    assert frobenius_norm(f.reconstruct() - w) <= 1e-10 * max(norm, 1e-300) + 1e-300
    assert orth_gap(f.u) <= 1e-10 and orth_gap(f.v) <= 1e-10
    assert np.all(np.diff(f.sigma) <= 0)


# --- truncate / truncation_error ---------------------------------------------------


def test_truncate_full_rank_reconstructs():
    w = np.random.default_rng(6).standard_normal((7, 5))
    f = svd(w)
    assert frobenius_norm(truncate(f, f.k) - w) <= 1e-10 * frobenius_norm(w)


def test_truncate_diagonal():
    np.testing.assert_allclose(truncate(svd(np.diag([3.0, 1.0])), 1), [[3.0, 0.0], [0.0, 0.0]], atol=1e-15)


def test_truncate_tail_formula_8x8():
    w = np.random.default_rng(8).standard_normal((8, 8))
    f = svd(w)
    expected = tail_norm(f.sigma, 3)
    assert abs(frobenius_norm(truncate(f, 3) - w) - expected) <= 1e-10 * expected
    assert numerical_rank(truncate(f, 3)) <= 3


def test_truncation_error_diagonal_and_full():
    f = svd(np.diag([3.0, 1.0]))
    assert truncation_error(f, 1) == pytest.approx(1.0, rel=1e-15)
    assert truncation_error(f, 2) == 0.0


def test_truncation_error_geometric_spectrum():
    rng = np.random.default_rng(16)
    q1, _ = np.linalg.qr(rng.standard_normal((16, 16)))
    q2, _ = np.linalg.qr(rng.standard_normal((16, 16)))
    sig = 0.5 ** np.arange(1, 17)
    w = (q1 * sig) @ q2.T
    expected = math.sqrt(sum(0.25 ** j for j in range(5, 17)))
    got = truncation_error(svd(w), 4)
    assert abs(got - expected) <= 1e-10 * expected


def test_truncation_error_monotone_and_zero_at_rank():
    rng = np.random.default_rng(9)
    w = rng.standard_normal((10, 4)) @ rng.standard_normal((4, 8))
    f = svd(w)
    errs = [truncation_error(f, r) for r in range(1, f.k + 1)]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[3] <= 1e-12 * frobenius_norm(w)


@pytest.mark.parametrize("r", [0, -1, 6, 2.5, True])
def test_rank_out_of_range(r):
    f = svd(np.ones((5, 5)))
    with pytest.raises(RankOutOfRange):
        truncate(f, r)
    with pytest.raises(RankOutOfRange):
        truncation_error(f, r)


def test_error_ratios_match_tail_formula():
    w = np.random.default_rng(10).standard_normal((12, 9))
    f = svd(w)
    ratios = error_ratios(f)
    norm = frobenius_norm(w)
    for r in range(1, f.k + 1):
        assert abs(ratios[r - 1] - tail_norm(f.sigma, r) / norm) <= 1e-12
    assert np.all(np.diff(ratios) <= 0) and ratios[-1] == 0.0


# --- dense kernels ------------------------------------------------------------------


def test_kernels():
    a = np.random.default_rng(12).standard_normal((3, 3))
    np.testing.assert_array_equal(matmul(np.eye(3), a), a)
    np.testing.assert_array_equal(weighted_sum([a, a], [0.5, 0.5]), a)
    assert frobenius_norm(np.ones((3, 3))) == 3.0
    np.testing.assert_array_equal(scale(a, 2.0), 2.0 * a)


def test_kernel_shape_errors():
    with pytest.raises(ShapeMismatch):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        weighted_sum([np.ones((2, 2)), np.ones((2, 3))], [0.5, 0.5])


def test_weighted_sum_reduces_in_input_order():
    mats = [np.full((1, 1), v) for v in (1e16, 1.0, -1e16)]
    w = [1.0, 1.0, 1.0]
    # ((1e16 + 1) - 1e16) rounds to 0 in float64, a reordered sum would give 1
    assert weighted_sum(mats, w)[0, 0] == 0.0


def test_as_matrix_converts_lists():
    m = as_matrix([[1, 2], [3, 4]])
    assert m.dtype == np.float64 and m.shape == (2, 2)
