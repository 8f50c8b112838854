import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkfac import linalg
from dkfac.errors import DimensionError, SingularMatrixError

from conftest import spd


class TestSymEig:
    def test_identity(self, backend):
        e = linalg.sym_eig(np.eye(3))
        np.testing.assert_array_equal(e.lam, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(np.abs(e.q), np.eye(3), atol=1e-15)

    def test_diagonal_sorted_descending(self, backend):
        e = linalg.sym_eig(np.diag([1.0, 4.0]))
        np.testing.assert_array_equal(e.lam, [4.0, 1.0])
        np.testing.assert_allclose(np.abs(e.q), [[0, 1], [1, 0]], atol=1e-15)

    def test_random_spd_reconstruction(self, backend, rng):
        m = spd(rng, 6)
        e = linalg.sym_eig(m)
        assert np.abs(e.reconstruct() - m).max() <= 1e-8
        assert np.abs(e.q.T @ e.q - np.eye(6)).max() <= 1e-10
        assert np.all(np.diff(e.lam) <= 0)

    def test_matches_lapack_spectrum(self, backend, rng):
        m = spd(rng, 20)
        np.testing.assert_allclose(linalg.sym_eig(m).lam, np.linalg.eigvalsh(m)[::-1], rtol=1e-10)

    def test_clamps_negative_eigenvalues(self, backend):
        e = linalg.sym_eig(np.diag([2.0, -1e-14, -3.0]))
        assert np.all(e.lam >= 0)
        unclamped = linalg.sym_eig(np.diag([2.0, -3.0]), clamp=False)
        np.testing.assert_array_equal(unclamped.lam, [2.0, -3.0])

    def test_deterministic(self, backend, rng):
        m = spd(rng, 9)
        a, b = linalg.sym_eig(m), linalg.sym_eig(m.copy())
        assert a.q.tobytes() == b.q.tobytes() and a.lam.tobytes() == b.lam.tobytes()

    def test_symmetrizes_small_asymmetry(self, backend, rng):
        m = spd(rng, 4)
        m[0, 1] += 1e-12
        e = linalg.sym_eig(m)
        assert np.abs(e.reconstruct() - 0.5 * (m + m.T)).max() <= 1e-8

    def test_rejects_bad_input(self):
        with pytest.raises(DimensionError):
            linalg.sym_eig(np.ones((2, 3)))
        with pytest.raises(ValueError):
            linalg.sym_eig(np.array([[1.0, np.nan], [np.nan, 1.0]]))
        with pytest.raises(ValueError):
            linalg.sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_backends_agree(self, rng):
        from dkfac import _accel

        m = spd(rng, 15)
        prev = _accel.backend()
        try:
            _accel.set_backend("numpy")
            a = linalg.sym_eig(m)
            _accel.set_backend("numba")
            b = linalg.sym_eig(m)
        finally:
            _accel.set_backend(prev)
        np.testing.assert_allclose(a.lam, b.lam, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(a.reconstruct(), b.reconstruct(), atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 64), seed=st.integers(0, 2**32 - 1), psd=st.booleans())
    def test_reconstruction_property(self, n, seed, psd):
        r = np.random.default_rng(seed)
        x = r.standard_normal((n, n))
        m = x @ x.T if psd else 0.5 * (x + x.T)
        e = linalg.sym_eig(m, clamp=psd)
        scale = np.abs(m).max()
        assert np.abs(e.reconstruct() - m).max() <= 1e-8 * scale
        assert np.abs(e.q.T @ e.q - np.eye(n)).max() <= 1e-10


class TestKron:
    def test_worked_example(self):
        got = linalg.kron(np.array([[1, 2], [3, 4]]), np.array([[5, 6], [7, 8], [9, 0]]))
        assert got.shape == (6, 4)
        np.testing.assert_array_equal(got[0], [5, 6, 10, 12])
        np.testing.assert_array_equal(got[-1], [27, 0, 36, 0])

    def test_identities(self):
        np.testing.assert_array_equal(linalg.kron(np.eye(2), np.eye(3)), np.eye(6))

    def test_blocks(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 5))
        k = linalg.kron(a, b)
        for i in range(2):
            for j in range(3):
                np.testing.assert_array_equal(k[4 * i : 4 * i + 4, 5 * j : 5 * j + 5], a[i, j] * b)

    def test_mixed_product(self, rng):
        a, c = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
        b, d = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        lhs = linalg.kron(a, b) @ linalg.kron(c, d)
        assert np.abs(lhs - linalg.kron(a @ c, b @ d)).max() <= 1e-10

    def test_rejects_empty_and_huge(self):
        with pytest.raises(DimensionError):
            linalg.kron(np.ones((0, 2)), np.ones((2, 2)))
        with pytest.raises(OverflowError):
            linalg.kron(np.ones((50000, 1)), np.ones((50000, 1)))


class TestInverse:
    def test_identity_and_diagonal(self, backend):
        np.testing.assert_array_equal(linalg.inverse(np.eye(4)), np.eye(4))
        np.testing.assert_array_equal(linalg.inverse(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]))

    def test_random_spd(self, backend, rng):
        m = spd(rng, 7)
        assert np.abs(m @ linalg.inverse(m) - np.eye(7)).max() <= 1e-8

    def test_kron_inverse_property(self, backend, rng):
        a, g = spd(rng, 5), spd(rng, 5)
        lhs = linalg.inverse(linalg.kron(a, g))
        rhs = linalg.kron(linalg.inverse(a), linalg.inverse(g))
        assert np.abs(lhs - rhs).max() <= 1e-8

    def test_needs_pivoting(self, backend):
        m = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(linalg.inverse(m), m)

    def test_singular_names_pivot(self, backend):
        m = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]])
        with pytest.raises(SingularMatrixError) as info:
            linalg.inverse(m)
        assert info.value.pivot == 1
        assert "pivot 1" in str(info.value)
        with pytest.raises(SingularMatrixError):
            linalg.inverse(np.zeros((2, 2)))

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(2, 8), seed=st.integers(0, 2**32 - 1))
    def test_kron_identities_property(self, n, seed):
        r = np.random.default_rng(seed)
        a, g = spd(r, n), spd(r, max(2, n - 1))
        lhs = linalg.inverse(linalg.kron(a, g))
        assert np.abs(lhs - linalg.kron(linalg.inverse(a), linalg.inverse(g))).max() <= 1e-8


class TestVec:
    def test_row_major(self):
        np.testing.assert_array_equal(linalg.vec(np.array([[1, 2], [3, 4]])).ravel(), [1, 2, 3, 4])
        assert linalg.vec(np.ones((3, 4))).shape == (12, 1)

    def test_roundtrip(self, rng):
        m = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(linalg.unvec(linalg.vec(m), 3, 4), m)
        with pytest.raises(DimensionError):
            linalg.unvec(np.ones(5), 2, 3)

    def test_matrix_form_matches_brute_force(self, rng):
        # vec(G V A) built entry by entry, independent of kron()
        g, v, a = (rng.standard_normal((3, 3)) for _ in range(3))
        rows, cols = v.shape
        brute = np.zeros((rows * cols, rows * cols))
        for i in range(rows):
            for j in range(cols):
                for k in range(rows):
                    for l in range(cols):
                        brute[i * cols + j, k * cols + l] = g[i, k] * a[l, j]
        np.testing.assert_allclose(brute @ linalg.vec(v), linalg.vec(g @ v @ a), atol=1e-12)
        # symmetric A: the block equals curvature_block(A, G)
        a_sym = a + a.T
        np.testing.assert_allclose(
            linalg.curvature_block(a_sym, g) @ linalg.vec(v), linalg.vec(g @ v @ a_sym), atol=1e-12
        )
