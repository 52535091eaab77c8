"""Tensor algebra: contraction, unfolding, SVD, and Tucker decomposition.

Oracles are independent of the code under test: hand-computed values,
numpy.linalg for singular spectra, and brute-force summation.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcnn.tensor import (
    ShapeMismatchError,
    contract,
    effective_rank,
    fold,
    svd,
    tucker_decompose,
    tucker_reconstruct,
    unfold,
)


class TestContract:
    def test_matrix_product(self):
        """Contracting the inner axes of two 2x2 matrices is matmul."""
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(
            contract(a, b, 1, 0), [[19.0, 22.0], [43.0, 50.0]]
        )

    def test_identity_leaves_operand_unchanged(self):
        x = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(contract(np.eye(3), x, 1, 0), x)

    def test_full_self_contraction_is_squared_frobenius(self):
        """Contracting a tensor with itself over all axes gives sum of
        squares; checked against the brute-force sum."""
        rng = np.random.default_rng(3)
        t = rng.standard_normal((2, 3, 4))
        res = contract(t, t, [0, 1, 2], [0, 1, 2])
        assert res.shape == ()
        assert res.size == 1
        np.testing.assert_allclose(res, np.sum(t * t), rtol=1e-12)
        ones = np.ones((2, 2))
        assert contract(ones, ones, [0, 1], [0, 1]) == 4.0

    def test_result_axis_order(self):
        a = np.zeros((2, 5, 3))
        b = np.zeros((5, 7))
        assert contract(a, b, 1, 0).shape == (2, 3, 7)

    def test_associativity_on_matrix_chains(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            a = rng.standard_normal((4, 5))
            b = rng.standard_normal((5, 6))
            c = rng.standard_normal((6, 3))
            left = contract(contract(a, b, 1, 0), c, 1, 0)
            right = contract(a, contract(b, c, 1, 0), 1, 0)
            np.testing.assert_allclose(
                left, right, rtol=1e-10, atol=1e-10 * np.abs(left).max()
            )

    def test_mismatched_axis_lengths_name_the_pair(self):
        a = np.zeros((2, 3))
        b = np.zeros((4, 5))
        with pytest.raises(ShapeMismatchError, match=r"axis 1 of a \(length 3\)"):
            contract(a, b, 1, 0)

    def test_duplicate_and_out_of_range_axes_rejected(self):
        a = np.zeros((2, 2))
        with pytest.raises(ShapeMismatchError, match="duplicate"):
            contract(a, a, [0, 0], [0, 1])
        with pytest.raises(ShapeMismatchError, match="out of range"):
            contract(a, a, [5], [0])


class TestUnfoldFold:
    def test_unfold_shape(self):
        t = np.zeros((2, 3, 4))
        assert unfold(t, 1).shape == (3, 8)

    def test_known_unfolding_columns(self):
        """Columns enumerate remaining indices with lower modes fastest."""
        t = np.arange(24.0).reshape(2, 3, 4)
        m = unfold(t, 1)
        # column 0 is the fiber at (i0=0, i2=0); column 1 at (i0=1, i2=0)
        np.testing.assert_array_equal(m[:, 0], t[0, :, 0])
        np.testing.assert_array_equal(m[:, 1], t[1, :, 0])
        np.testing.assert_array_equal(m[:, 2], t[0, :, 1])

    @settings(max_examples=40, deadline=None)
    @given(
        shape=st.lists(st.integers(1, 4), min_size=1, max_size=5),
        data=st.data(),
    )
    def test_fold_unfold_roundtrip_bit_exact(self, shape, data):
        mode = data.draw(st.integers(0, len(shape) - 1))
        rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
        t = rng.standard_normal(shape)
        back = fold(unfold(t, mode), mode, shape)
        assert (back == t).all()

    def test_mode_out_of_range(self):
        with pytest.raises(ShapeMismatchError):
            unfold(np.zeros((2, 2)), 2)
        with pytest.raises(ShapeMismatchError):
            fold(np.zeros((2, 2)), 3, (2, 2))

    def test_rank_one_tensor_unfoldings_have_rank_one(self):
        """Every mode unfolding of an outer product has matrix rank 1
        (spectrum checked with numpy's SVD, not ours)."""
        rng = np.random.default_rng(11)
        u, v, w = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(5)
        t = np.einsum("i,j,k->ijk", u, v, w)
        for mode in range(3):
            s = np.linalg.svd(unfold(t, mode), compute_uv=False)
            assert np.sum(s > 1e-12 * s[0]) == 1


class TestSvd:
    def test_identity(self):
        res = svd(np.eye(4))
        np.testing.assert_allclose(res.s, np.ones(4))

    def test_diagonal(self):
        m = np.diag([3.0, 2.0])
        res = svd(m)
        np.testing.assert_array_equal(res.s, [3.0, 2.0])
        np.testing.assert_allclose(res.u @ np.diag(res.s) @ res.vt, m, atol=1e-14)

    @pytest.mark.parametrize("shape", [(10, 6), (6, 10), (8, 8), (20, 3)])
    def test_reconstruction_residual(self, shape):
        rng = np.random.default_rng(hash(shape) % 2**32)
        m = rng.standard_normal(shape)
        res = svd(m)
        err = np.linalg.norm(res.u @ np.diag(res.s) @ res.vt - m)
        assert err / np.linalg.norm(m) < 1e-10

    @pytest.mark.parametrize("shape", [(10, 6), (6, 10), (7, 7)])
    def test_orthonormality_and_ordering(self, shape):
        rng = np.random.default_rng(0)
        res = svd(rng.standard_normal(shape))
        k = min(shape)
        assert np.abs(res.u.T @ res.u - np.eye(k)).max() < 1e-10
        assert np.abs(res.vt @ res.vt.T - np.eye(k)).max() < 1e-10
        assert (np.diff(res.s) <= 0).all()
        assert (res.s >= 0).all()

    def test_rank_deficient_keeps_orthonormal_basis(self):
        m = np.outer(np.arange(1.0, 6.0), np.arange(1.0, 5.0))
        res = svd(m)
        assert effective_rank(res.s) == 1
        assert np.abs(res.u.T @ res.u - np.eye(4)).max() < 1e-10
        np.testing.assert_allclose(res.u @ np.diag(res.s) @ res.vt, m, atol=1e-12)

    def test_zero_matrix(self):
        res = svd(np.zeros((3, 5)))
        np.testing.assert_array_equal(res.s, np.zeros(3))
        assert np.abs(res.u.T @ res.u - np.eye(3)).max() == 0.0

    def test_deterministic_and_sign_convention(self):
        rng = np.random.default_rng(5)
        m = rng.standard_normal((9, 5))
        r1, r2 = svd(m), svd(m)
        assert (r1.u == r2.u).all() and (r1.s == r2.s).all() and (r1.vt == r2.vt).all()
        for j in range(r1.s.size):
            col = r1.u[:, j]
            assert col[np.argmax(np.abs(col))] > 0

    def test_input_validation(self):
        with pytest.raises(ShapeMismatchError):
            svd(np.zeros((2, 2, 2)))
        bad = np.ones((3, 3))
        bad[1, 1] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            svd(bad)


class TestTucker:
    def test_rank_one_tensor_exact_at_ranks_1111(self):
        rng = np.random.default_rng(2)
        vecs = [rng.standard_normal(d) for d in (3, 4, 5, 2)]
        w = np.einsum("i,j,k,l->ijkl", *vecs)
        rec = tucker_reconstruct(tucker_decompose(w, (1, 1, 1, 1)))
        assert np.linalg.norm(rec - w) / np.linalg.norm(w) < 1e-10

    def test_full_rank_exact(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((4, 3, 5, 3))
        rec = tucker_reconstruct(tucker_decompose(w, w.shape))
        assert np.linalg.norm(rec - w) / np.linalg.norm(w) < 1e-10

    def test_truncation_error_bounded_by_discarded_spectrum(self):
        """Squared reconstruction error is at most the sum over modes of the
        discarded squared singular values (spectra from numpy's SVD)."""
        rng = np.random.default_rng(6)
        for _ in range(10):
            w = rng.standard_normal((8, 3, 8, 3))
            ranks = (4, 3, 4, 3)
            rec = tucker_reconstruct(tucker_decompose(w, ranks))
            err2 = np.linalg.norm(rec - w) ** 2
            bound = sum(
                float(np.sum(np.linalg.svd(unfold(w, i), compute_uv=False)[ranks[i]:] ** 2))
                for i in range(4)
            )
            assert err2 <= bound * (1 + 1e-10) + 1e-12

    def test_factors_orthonormal(self):
        rng = np.random.default_rng(8)
        f = tucker_decompose(rng.standard_normal((5, 3, 6, 3)), (3, 2, 4, 2))
        for fac in f.factors:
            r = fac.shape[1]
            assert np.abs(fac.T @ fac - np.eye(r)).max() < 1e-8

    def test_identity_factors_return_core(self):
        rng = np.random.default_rng(9)
        w = rng.standard_normal((3, 3, 3, 3))
        f = tucker_decompose(w, w.shape)
        core_back = tucker_reconstruct(f)
        np.testing.assert_allclose(core_back, w, atol=1e-12)

    def test_zero_core_reconstructs_zero(self):
        rng = np.random.default_rng(10)
        f = tucker_decompose(rng.standard_normal((3, 3, 4, 3)), (2, 2, 2, 2))
        zeroed = type(f)(core=np.zeros_like(f.core), factors=f.factors)
        assert (tucker_reconstruct(zeroed) == 0).all()

    def test_rank_exceeding_dimension_when_unfolding_is_thin(self):
        """A mode whose unfolding has fewer columns than the requested rank
        still gets a full orthonormal factor."""
        rng = np.random.default_rng(12)
        w = rng.standard_normal((3, 3, 32, 3))
        f = tucker_decompose(w, (3, 3, 32, 3))
        fac = f.factors[2]
        assert fac.shape == (32, 32)
        assert np.abs(fac.T @ fac - np.eye(32)).max() < 1e-8
        rec = tucker_reconstruct(f)
        assert np.linalg.norm(rec - w) / np.linalg.norm(w) < 1e-10

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        w = rng.standard_normal((4, 3, 4, 3))
        f1 = tucker_decompose(w, (2, 2, 2, 2))
        f2 = tucker_decompose(w, (2, 2, 2, 2))
        assert (f1.core == f2.core).all()
        assert all((a == b).all() for a, b in zip(f1.factors, f2.factors))

    def test_errors(self):
        with pytest.raises(ShapeMismatchError, match="rank-4"):
            tucker_decompose(np.zeros((2, 2, 2)), (1, 1, 1))
        with pytest.raises(ShapeMismatchError, match="outside valid range"):
            tucker_decompose(np.zeros((2, 2, 2, 2)), (3, 1, 1, 1))
