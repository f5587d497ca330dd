import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moeforge.numerics import (
    FactorPair,
    NumericsError,
    SVDConvergenceError,
    as_matrix,
    cosine_similarity,
    frobenius_rel_error,
    svd_full,
    truncated_svd,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def tail_error(m, r):
    s = np.linalg.svd(m, compute_uv=False)
    return math.sqrt(float(np.sum(s[r:] ** 2))) / np.linalg.norm(m)


class TestCosine:
    def test_identical_vectors(self):
        assert cosine_similarity([3, 4], [3, 4]) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_forty_five_degrees(self):
        # the truncated literal 0.70710678 sits 1.2e-9 from the true value
        assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-9)
        assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(0.70710678, abs=2e-9)

    def test_zero_vector_raises(self):
        with pytest.raises(NumericsError):
            cosine_similarity([0, 0], [1, 1])

    def test_length_mismatch_raises(self):
        with pytest.raises(NumericsError):
            cosine_similarity([1, 2, 3], [1, 2])

    @given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite),
           st.floats(1e-3, 1e3))
    def test_symmetric_and_scale_invariant(self, u, v, c):
        if not np.any(u) or not np.any(v):
            return
        a = cosine_similarity(u, v)
        assert a == pytest.approx(cosine_similarity(v, u), abs=1e-12)
        assert cosine_similarity(c * u, v) == pytest.approx(a, abs=1e-12)
        assert -1.0 <= a <= 1.0

    @given(arrays(np.float64, 5, elements=st.floats(-1e300, 1e300, allow_nan=False)))
    def test_self_similarity_exactly_one(self, u):
        if np.any(u):
            assert cosine_similarity(u, u.copy()) == 1.0


class TestMatrix:
    def test_rejects_nan(self):
        with pytest.raises(NumericsError):
            as_matrix([[1.0, float("nan")]])

    def test_rejects_1d(self):
        with pytest.raises(NumericsError):
            as_matrix([1.0, 2.0])

    def test_factor_pair_rank_bounds(self):
        with pytest.raises(NumericsError):
            FactorPair(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(NumericsError):
            FactorPair(np.ones((4, 2)), np.ones((3, 1)))
        f = FactorPair(np.ones((4, 2)), np.ones((3, 2)))
        assert f.shape == (4, 3) and f.rank == 2 and f.size == 14


class TestSVD:
    def test_rank_one_exact(self):
        rng = np.random.default_rng(0)
        m = np.outer(rng.standard_normal(7), rng.standard_normal(5))
        f = truncated_svd(m, 1)
        assert frobenius_rel_error(m, f.delta()) <= 1e-10

    def test_identity_full_rank(self):
        f = truncated_svd(np.eye(2), 2)
        assert np.allclose(f.delta(), np.eye(2), atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_eckart_young_tail(self, seed):
        m = np.random.default_rng(seed).standard_normal((64, 64))
        f = truncated_svd(m, 8)
        assert frobenius_rel_error(m, f.delta()) == pytest.approx(tail_error(m, 8), rel=1e-6)

    @pytest.mark.parametrize("shape", [(9, 5), (5, 9), (6, 6), (1, 4), (4, 1)])
    def test_full_svd_matches_lapack(self, shape):
        m = np.random.default_rng(1).standard_normal(shape)
        u, s, vt = svd_full(m)
        assert np.allclose(u * s @ vt, m, atol=1e-12)
        assert np.allclose(s, np.linalg.svd(m, compute_uv=False), atol=1e-12)
        assert np.all(np.diff(s) <= 1e-15)
        assert np.allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-12)

    def test_sign_convention(self):
        m = np.random.default_rng(2).standard_normal((8, 6))
        u, _, _ = svd_full(m)
        for j in range(u.shape[1]):
            nz = u[np.abs(u[:, j]) > 0, j]
            assert nz[0] > 0
        # deterministic: same input, identical bits
        u2, s2, vt2 = svd_full(m.copy())
        assert np.array_equal(u, u2) and np.array_equal(svd_full(m)[2], vt2)

    def test_rank_out_of_range(self):
        with pytest.raises(NumericsError):
            truncated_svd(np.eye(3), 4)
        with pytest.raises(NumericsError):
            truncated_svd(np.eye(3), 0)

    def test_convergence_error_carries_residual(self):
        m = np.random.default_rng(3).standard_normal((10, 10))
        with pytest.raises(SVDConvergenceError) as ei:
            svd_full(m, max_sweeps=1, tol=1e-300)
        assert ei.value.sweeps == 1 and ei.value.residual > 0

    @given(st.integers(0, 2**31), st.integers(2, 10), st.integers(2, 10))
    def test_error_monotone_in_rank(self, seed, rows, cols):
        m = np.random.default_rng(seed).standard_normal((rows, cols))
        errs = [frobenius_rel_error(m, truncated_svd(m, r).delta()) for r in range(1, min(rows, cols) + 1)]
        assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))
        assert errs[-1] <= 1e-10

    def test_beats_other_rank_r_factorizations(self):
        rng = np.random.default_rng(4)
        m = rng.standard_normal((12, 10))
        best = frobenius_rel_error(m, truncated_svd(m, 3).delta())
        for _ in range(50):
            other = rng.standard_normal((12, 3)) @ rng.standard_normal((3, 10))
            assert best <= frobenius_rel_error(m, other)


class TestFrobenius:
    def test_exact(self):
        assert frobenius_rel_error(np.eye(3), np.eye(3)) == 0.0

    def test_full_error(self):
        assert frobenius_rel_error(np.eye(2), np.zeros((2, 2))) == 1.0

    def test_hand_value(self):
        assert frobenius_rel_error(np.diag([3.0, 4.0]), np.diag([3.0, 0.0])) == pytest.approx(0.8, abs=1e-15)

    def test_errors(self):
        with pytest.raises(NumericsError):
            frobenius_rel_error(np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(NumericsError):
            frobenius_rel_error(np.eye(2), np.eye(3))
