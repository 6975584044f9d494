import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from perfopt.errors import InvalidBoundsError, InvalidInputError, SingularMatrixError
from perfopt.linalg import (
    clip_gradient,
    invert_small,
    numerical_rank,
    project_box,
    pseudoinverse,
    pseudoinverse_with_rank,
    spectral_norm,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def matrices(max_side=6):
    shapes = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shapes.flatmap(lambda s: arrays(float, s, elements=finite))


class TestPseudoinverse:
    def test_identity(self):
        np.testing.assert_array_equal(pseudoinverse(np.eye(3)), np.eye(3))

    def test_rank_deficient_diagonal(self):
        np.testing.assert_allclose(pseudoinverse(np.diag([1.0, 0.0])), np.diag([1.0, 0.0]))

    def test_full_row_rank_right_inverse(self):
        M = np.random.default_rng(0).normal(size=(2, 4))
        np.testing.assert_allclose(M @ pseudoinverse(M), np.eye(2), atol=1e-10)

    def test_zero_matrix(self):
        np.testing.assert_array_equal(pseudoinverse(np.zeros((2, 3))), np.zeros((3, 2)))

    def test_rank_reported(self):
        M = np.outer([1.0, 2.0, 3.0], [1.0, -1.0])
        assert pseudoinverse_with_rank(M)[1] == 1 == numerical_rank(M)

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(InvalidInputError):
            pseudoinverse(np.array([[1.0, bad]]))

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            pseudoinverse(np.zeros((0, 3)))

    @settings(max_examples=200, deadline=None)
    @given(matrices())
    def test_penrose_identity(self, M):
        err = np.linalg.norm(M @ pseudoinverse(M) @ M - M)
        assert err <= 1e-8 * (1 + np.linalg.norm(M))


class TestInvertSmall:
    def test_identity(self):
        np.testing.assert_array_equal(invert_small(np.eye(4)), np.eye(4))

    def test_scalar(self):
        np.testing.assert_allclose(invert_small([[0.75]]), [[4 / 3]])

    def test_scaled_identity(self):
        M = np.eye(2) - 0.25 * np.eye(2)
        inv = invert_small(M)
        np.testing.assert_allclose(inv, 4 / 3 * np.eye(2))
        np.testing.assert_allclose(inv @ M, np.eye(2), atol=1e-15)

    def test_singular(self):
        with pytest.raises(SingularMatrixError):
            invert_small([[1.0, 2.0], [2.0, 4.0]])

    def test_ill_conditioned(self):
        with pytest.raises(SingularMatrixError):
            invert_small(np.diag([1.0, 1e-13]))

    def test_non_square(self):
        with pytest.raises(InvalidInputError):
            invert_small(np.ones((2, 3)))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_inverse_property(self, d, seed):
        M = np.random.default_rng(seed).normal(size=(d, d))
        if np.linalg.cond(M) >= 1e8:
            return
        np.testing.assert_allclose(invert_small(M) @ M, np.eye(d), atol=1e-8)


class TestClipGradient:
    def test_small_unchanged(self):
        v = np.array([3.0, 0.0])
        np.testing.assert_array_equal(clip_gradient(v, 10), v)

    def test_large_normalized_to_unit(self):
        np.testing.assert_array_equal(clip_gradient([20.0, 0.0], 10), [1.0, 0.0])

    def test_zero(self):
        np.testing.assert_array_equal(clip_gradient(np.zeros(3), 10), np.zeros(3))

    def test_boundary_kept(self):
        v = np.array([6.0, 8.0])
        np.testing.assert_array_equal(clip_gradient(v, 10), v)

    def test_bad_threshold(self):
        with pytest.raises(InvalidInputError):
            clip_gradient([1.0], 0)

    # normalizing to a unit vector can only shrink a vector when the threshold is >= 1
    @given(arrays(float, st.integers(1, 8), elements=finite), st.floats(1.0, 1e3))
    def test_never_grows_and_identity_below(self, v, max_norm):
        out = clip_gradient(v, max_norm)
        assert np.linalg.norm(out) <= np.linalg.norm(v) * (1 + 1e-12)
        if np.linalg.norm(v) <= max_norm:
            np.testing.assert_array_equal(out, v)
        else:
            assert np.linalg.norm(out) == pytest.approx(1.0)

    def test_small_threshold_still_returns_unit(self):
        out = clip_gradient([0.5, 0.0], 0.1)
        np.testing.assert_array_equal(out, [1.0, 0.0])


class TestProjectBox:
    def test_clamp(self):
        np.testing.assert_array_equal(project_box([7.0], [-5.0], [5.0]), [5.0])

    def test_inside(self):
        th = np.array([0.5, -1.0])
        np.testing.assert_array_equal(project_box(th, -5, 5), th)

    def test_bad_bounds(self):
        with pytest.raises(InvalidBoundsError):
            project_box([0.0, 0.0], [0.0, 1.0], [1.0, 0.0])

    @given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite), arrays(float, 4, elements=finite))
    def test_in_box_and_idempotent(self, th, a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        once = project_box(th, lo, hi)
        assert np.all(once >= lo) and np.all(once <= hi)
        np.testing.assert_array_equal(project_box(once, lo, hi), once)


class TestSpectralNorm:
    @pytest.mark.parametrize("M, expected", [
        (np.eye(4), 1.0),
        (0.25 * np.eye(2), 0.25),
        (np.diag([0.9, 0.3]), 0.9),
    ])
    def test_values(self, M, expected):
        assert spectral_norm(M) == pytest.approx(expected)


def test_subnormal_matrix_treated_as_zero():
    pinv, rank = pseudoinverse_with_rank(np.array([[2.22507386e-313]]))
    assert rank == 0 and np.all(pinv == 0)
