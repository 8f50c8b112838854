"""Dense linear algebra used by the preconditioner.

Matrices are plain 2-d ``float64`` numpy arrays.  Vectorization is
row-major throughout: ``vec(V) == V.ravel()``.  Under that convention
``vec(X @ V @ Y) == kron(X, Y.T) @ vec(V)``, so the curvature block that
acts on a gradient of shape ``(out, in)`` is ``kron(G, A)``.
"""
from dataclasses import dataclass

import numpy as np

from . import _accel, _kernels
from .errors import DimensionError, SingularMatrixError

SYMMETRY_TOL = 1e-9
MAX_KRON_ELEMENTS = 2**31


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition ``m = q @ diag(lam) @ q.T``, eigenvalues descending."""

    q: np.ndarray
    lam: np.ndarray

    @property
    def n(self):
        return self.lam.shape[0]

    def reconstruct(self):
        return (self.q * self.lam) @ self.q.T


def as_matrix(m, name="matrix"):
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"{name} must be a non-empty 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _square(m, name):
    arr = as_matrix(m, name)
    if arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {arr.shape}")
    return arr


def sym_eig(m, clamp=True):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    The input is symmetrized as ``(m + m.T) / 2`` first; asymmetry beyond
    ``SYMMETRY_TOL`` (relative to the largest entry) is rejected.  With
    ``clamp`` set, negative eigenvalues are raised to zero: Kronecker
    factors are PSD and negatives are rounding noise.  Each eigenvector is
    signed so that its largest-magnitude entry is positive, which makes the
    output a deterministic function of the input bits.
    """
    arr = _square(m, "sym_eig input")
    scale = max(np.max(np.abs(arr)), 1.0)
    if np.max(np.abs(arr - arr.T)) > SYMMETRY_TOL * scale:
        raise ValueError("sym_eig input is not symmetric")
    arr = 0.5 * (arr + arr.T)
    if _accel.use_numba():
        w, v, _ = _kernels.jacobi_eig_numba(arr, _kernels.EIG_TOL, _kernels.MAX_SWEEPS)
    else:
        w, v, _ = _kernels.jacobi_eig_numpy(arr, _kernels.EIG_TOL, _kernels.MAX_SWEEPS)
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[idx, np.arange(v.shape[1])] < 0, -1.0, 1.0)
    v = v * signs
    if clamp:
        w = np.maximum(w, 0.0)
    return SymEig(q=v, lam=w)


def kron(a, b):
    """Kronecker product: block ``(i, j)`` of the result is ``a[i, j] * b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.size == 0 or b.size == 0:
        raise DimensionError("kron operands must be non-empty 2-d arrays")
    m, n = a.shape
    p, q = b.shape
    if m * p * n * q > MAX_KRON_ELEMENTS:
        raise OverflowError(f"kron result {m * p}x{n * q} exceeds {MAX_KRON_ELEMENTS} elements")
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(m * p, n * q)


def inverse(m):
    """Explicit inverse by Gauss-Jordan elimination with partial pivoting."""
    arr = _square(m, "inverse input")
    n = arr.shape[0]
    tol = n * np.finfo(np.float64).eps * np.max(np.abs(arr))
    if _accel.use_numba():
        inv, bad = _kernels.gauss_jordan_numba(arr, tol)
    else:
        inv, bad = _kernels.gauss_jordan_numpy(arr, tol)
    if bad >= 0:
        raise SingularMatrixError(int(bad))
    return inv


def vec(m):
    """Row-major vectorization as an ``(rows * cols, 1)`` column."""
    arr = np.asarray(m)
    return arr.reshape(-1, 1).copy()


def unvec(v, rows, cols):
    arr = np.asarray(v)
    if arr.size != rows * cols:
        raise DimensionError(f"cannot unvec {arr.size} entries into {rows}x{cols}")
    return arr.reshape(rows, cols).copy()


def curvature_block(a_factor, g_factor):
    """Kronecker curvature block acting on row-major ``vec`` of an (out, in) gradient."""
    return kron(g_factor, a_factor)
