"""Hot numeric kernels, each in a numba flavour and a pure-numpy flavour.

The public wrappers in :mod:`dkfac.linalg` and :mod:`dkfac.nn` dispatch on
:func:`dkfac._accel.use_numba`.  Both flavours implement the same algorithm
family and agree to rounding; they are not bitwise identical to each other,
but each one is deterministic.
"""
import numpy as np

from ._accel import njit

MAX_SWEEPS = 100
EIG_TOL = 1e-12


# ---------------------------------------------------------------- Jacobi --

@njit
def jacobi_eig_numba(a, tol, max_sweeps):
    """Cyclic (row-by-row) Jacobi on a copy of the symmetric matrix ``a``.

    Returns ``(eigenvalues, eigenvectors, sweeps)``; eigenvalues unsorted.
    """
    n = a.shape[0]
    a = a.copy()
    v = np.eye(n)
    fro = 0.0
    for i in range(n):
        for j in range(n):
            fro += a[i, j] * a[i, j]
    thresh = tol * np.sqrt(fro)
    sweeps = 0
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    off += a[i, j] * a[i, j]
        if np.sqrt(off) <= thresh:
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    return w, v, sweeps


def _tournament(m):
    """Round-robin pairings of ``m`` (even) indices; ``m - 1`` rounds."""
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        half = m // 2
        rounds.append((np.array(players[:half]), np.array(players[half:][::-1])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eig_numpy(a, tol, max_sweeps):
    """Parallel-ordered Jacobi: each round applies ``n/2`` disjoint rotations at once."""
    n = a.shape[0]
    m = n + (n % 2)
    work = np.zeros((m, m))
    work[:n, :n] = a
    v = np.eye(m)
    thresh = tol * np.linalg.norm(a)
    rounds = _tournament(m) if m > 1 else []
    sweeps = 0
    for _ in range(max_sweeps):
        off = work - np.diag(np.diag(work))
        if np.sqrt(np.sum(off * off)) <= thresh:
            break
        sweeps += 1
        for p, q in rounds:
            apq = work[p, q]
            app = work[p, p]
            aqq = work[q, q]
            active = apq != 0.0
            safe = np.where(active, apq, 1.0)
            with np.errstate(over="ignore"):
                theta = (aqq - app) / (2.0 * safe)
                sign = np.where(theta >= 0.0, 1.0, -1.0)
                t = sign / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            cols_p = work[:, p].copy()
            cols_q = work[:, q]
            work[:, p] = c * cols_p - s * cols_q
            work[:, q] = s * cols_p + c * cols_q
            rows_p = work[p, :].copy()
            rows_q = work[q, :]
            work[p, :] = c[:, None] * rows_p - s[:, None] * rows_q
            work[q, :] = s[:, None] * rows_p + c[:, None] * rows_q
            vp = v[:, p].copy()
            vq = v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    return np.diag(work)[:n].copy(), v[:n, :n].copy(), sweeps


# ----------------------------------------------------------- inversion --

@njit
def gauss_jordan_numba(a, tol):
    """Inverse by Gauss-Jordan with partial pivoting.

    Returns ``(inverse, failed_pivot)``; ``failed_pivot`` is -1 on success.
    """
    n = a.shape[0]
    work = a.copy()
    inv = np.eye(n)
    for k in range(n):
        piv = k
        best = abs(work[k, k])
        for i in range(k + 1, n):
            if abs(work[i, k]) > best:
                best = abs(work[i, k])
                piv = i
        if best <= tol:
            return inv, k
        if piv != k:
            for j in range(n):
                tmp = work[k, j]
                work[k, j] = work[piv, j]
                work[piv, j] = tmp
                tmp = inv[k, j]
                inv[k, j] = inv[piv, j]
                inv[piv, j] = tmp
        d = work[k, k]
        for j in range(n):
            work[k, j] /= d
            inv[k, j] /= d
        for i in range(n):
            if i == k:
                continue
            f = work[i, k]
            if f == 0.0:
                continue
            for j in range(n):
                work[i, j] -= f * work[k, j]
                inv[i, j] -= f * inv[k, j]
    return inv, -1


def gauss_jordan_numpy(a, tol):
    n = a.shape[0]
    work = a.copy()
    inv = np.eye(n)
    for k in range(n):
        piv = k + int(np.argmax(np.abs(work[k:, k])))
        if abs(work[piv, k]) <= tol:
            return inv, k
        if piv != k:
            work[[k, piv]] = work[[piv, k]]
            inv[[k, piv]] = inv[[piv, k]]
        d = work[k, k]
        work[k] /= d
        inv[k] /= d
        f = work[:, k].copy()
        f[k] = 0.0
        work -= np.outer(f, work[k])
        inv -= np.outer(f, inv[k])
    return inv, -1


# -------------------------------------------------------------- im2col --

@njit
def im2col_numba(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[0], xp.shape[1]
    out = np.empty((n * oh * ow, c * kh * kw), dtype=xp.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                col = 0
                for ch in range(c):
                    for u in range(kh):
                        for w in range(kw):
                            out[row, col] = xp[b, ch, i * stride + u, j * stride + w]
                            col += 1
    return out


def im2col_numpy(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


@njit
def col2im_numba(cols, padded_shape, kh, kw, stride, oh, ow):
    n, c, hp, wp = padded_shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                col = 0
                for ch in range(c):
                    for u in range(kh):
                        for w in range(kw):
                            out[b, ch, i * stride + u, j * stride + w] += cols[row, col]
                            col += 1
    return out


def col2im_numpy(cols, padded_shape, kh, kw, stride, oh, ow):
    n, c, hp, wp = padded_shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for u in range(kh):
        for w in range(kw):
            out[:, :, u : u + stride * oh : stride, w : w + stride * ow : stride] += blocks[..., u, w]
    return out
