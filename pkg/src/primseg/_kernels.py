"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time.  Set ``PRIMSEG_NUMBA=0`` to force
the numpy path (useful on platforms without numba, and for cross-checking).
Both implementations are always importable as :data:`numba_impl` (``None``
when numba is missing) and :data:`numpy_impl`, so tests and the benchmark can
compare them directly.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_JACOBI_TOL = 1e-15
_JACOBI_SWEEPS = 40
# singular values below this fraction of the largest get a completed U column
_RANK_TOL = 1e-15
_PAIRS = ((0, 1), (0, 2), (1, 2))


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _svd3_finish(a, v):
    """Sort, normalise and sign-fix the output of a one-sided Jacobi sweep.

    ``a`` holds ``M @ V`` column-orthogonalised; both are (B, 3, 3).
    """
    b = a.shape[0]
    s = np.sqrt(np.sum(a * a, axis=1))
    order = np.argsort(-s, axis=1, kind="stable")
    rows = np.arange(b)[:, None]
    s = s[rows, order]
    a = np.take_along_axis(a, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)

    u = np.zeros_like(a)
    eye = np.eye(3)
    for i in range(b):
        s0 = s[i, 0]
        for j in range(3):
            if s[i, j] > 0.0 and s[i, j] > _RANK_TOL * s0:
                u[i, :, j] = a[i, :, j] / s[i, j]
            elif j == 0:
                u[i] = eye
                break
            elif j == 1:
                # any unit vector orthogonal to u0
                k = int(np.argmin(np.abs(u[i, :, 0])))
                w = np.cross(u[i, :, 0], eye[k])
                u[i, :, 1] = w / np.sqrt(np.sum(w * w))
            else:
                w = np.cross(u[i, :, 0], u[i, :, 1])
                u[i, :, 2] = w / np.sqrt(np.sum(w * w))

    # canonical sign: largest-magnitude entry of every V column positive
    idx = np.argmax(np.abs(v), axis=1)
    pick = np.take_along_axis(v, idx[:, None, :], axis=1)[:, 0, :]
    sign = np.where(pick < 0.0, -1.0, 1.0)
    v = v * sign[:, None, :]
    u = u * sign[:, None, :]
    return u, s, v


def _svd3_numpy(m):
    m = np.asarray(m, dtype=np.float64)
    a = m.copy()
    b = a.shape[0]
    v = np.broadcast_to(np.eye(3), (b, 3, 3)).copy()
    for _ in range(_JACOBI_SWEEPS):
        rotated = False
        for p, q in _PAIRS:
            ap = a[:, :, p]
            aq = a[:, :, q]
            alpha = np.sum(ap * ap, axis=1)
            beta = np.sum(aq * aq, axis=1)
            gamma = np.sum(ap * aq, axis=1)
            active = np.abs(gamma) > _JACOBI_TOL * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            sgn = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)[:, None]
            s = np.where(active, s, 0.0)[:, None]
            ap, aq = ap.copy(), aq.copy()
            a[:, :, p] = c * ap - s * aq
            a[:, :, q] = s * ap + c * aq
            vp, vq = v[:, :, p].copy(), v[:, :, q].copy()
            v[:, :, p] = c * vp - s * vq
            v[:, :, q] = s * vp + c * vq
        if not rotated:
            break
    return _svd3_finish(a, v)


def _nearest_numpy(queries, points, chunk=256):
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    p = queries.shape[0]
    idx = np.empty(p, dtype=np.int64)
    d2 = np.empty(p, dtype=np.float64)
    for start in range(0, p, chunk):
        q = queries[start:start + chunk]
        diff = q[:, None, :] - points[None, :, :]
        dist = np.sum(diff * diff, axis=2)
        j = np.argmin(dist, axis=1)
        idx[start:start + chunk] = j
        d2[start:start + chunk] = dist[np.arange(len(q)), j]
    return idx, d2


def _pairwise_dist_rows(z, start, stop):
    diff = z[start:stop, None, :] - z[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _kth_neighbor_numpy(z, k, chunk=128):
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d = _pairwise_dist_rows(z, start, stop)
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        out[start:stop] = np.partition(d, k - 1, axis=1)[:, k - 1]
    return out


def _density_numpy(g, radius, chunk=128):
    g = np.asarray(g, dtype=np.float64)
    n = g.shape[0]
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        out[start:stop] = np.sum(_pairwise_dist_rows(g, start, stop) <= radius, axis=1)
    return out


numpy_impl = SimpleNamespace(
    name="numpy",
    svd3=_svd3_numpy,
    nearest=_nearest_numpy,
    kth_neighbor_distance=_kth_neighbor_numpy,
    density=_density_numpy,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

numba_impl = None

if numba is not None:
    _njit = numba.njit(cache=True, nogil=True)

    @_njit
    def _jacobi3(m):
        a = m.copy()
        v = np.eye(3)
        for _ in range(_JACOBI_SWEEPS):
            rotated = False
            for pair in range(3):
                if pair == 0:
                    p, q = 0, 1
                elif pair == 1:
                    p, q = 0, 2
                else:
                    p, q = 1, 2
                alpha = a[0, p] * a[0, p] + a[1, p] * a[1, p] + a[2, p] * a[2, p]
                beta = a[0, q] * a[0, q] + a[1, q] * a[1, q] + a[2, q] * a[2, q]
                gamma = a[0, p] * a[0, q] + a[1, p] * a[1, q] + a[2, p] * a[2, q]
                if not abs(gamma) > _JACOBI_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for k in range(3):
                    ap = a[k, p]
                    aq = a[k, q]
                    a[k, p] = c * ap - s * aq
                    a[k, q] = s * ap + c * aq
                    vp = v[k, p]
                    vq = v[k, q]
                    v[k, p] = c * vp - s * vq
                    v[k, q] = s * vp + c * vq
            if not rotated:
                break
        return a, v

    @_njit
    def _jacobi3_batch(m):
        b = m.shape[0]
        a_out = np.empty_like(m)
        v_out = np.empty_like(m)
        for i in range(b):
            a, v = _jacobi3(m[i])
            a_out[i] = a
            v_out[i] = v
        return a_out, v_out

    def _svd3_numba(m):
        m = np.ascontiguousarray(m, dtype=np.float64)
        a, v = _jacobi3_batch(m)
        return _svd3_finish(a, v)

    @_njit
    def _nearest_kernel(queries, points):
        p = queries.shape[0]
        n = points.shape[0]
        idx = np.empty(p, dtype=np.int64)
        d2 = np.empty(p, dtype=np.float64)
        for i in range(p):
            best = np.inf
            bj = 0
            qx, qy, qz = queries[i, 0], queries[i, 1], queries[i, 2]
            for j in range(n):
                dx = qx - points[j, 0]
                dy = qy - points[j, 1]
                dz = qz - points[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
                    bj = j
            idx[i] = bj
            d2[i] = best
        return idx, d2

    def _nearest_numba(queries, points):
        return _nearest_kernel(
            np.ascontiguousarray(queries, dtype=np.float64),
            np.ascontiguousarray(points, dtype=np.float64),
        )

    @_njit
    def _row_dists(z, i, out):
        n, d = z.shape
        for j in range(n):
            acc = 0.0
            for k in range(d):
                t = z[i, k] - z[j, k]
                acc += t * t
            out[j] = np.sqrt(acc)

    @_njit
    def _kth_neighbor_kernel(z, k):
        n = z.shape[0]
        out = np.empty(n)
        row = np.empty(n)
        for i in range(n):
            _row_dists(z, i, row)
            row[i] = np.inf
            out[i] = np.partition(row, k - 1)[k - 1]
        return out

    def _kth_neighbor_numba(z, k):
        return _kth_neighbor_kernel(np.ascontiguousarray(z, dtype=np.float64), int(k))

    @_njit
    def _density_kernel(g, radius):
        n = g.shape[0]
        out = np.zeros(n, dtype=np.int64)
        row = np.empty(n)
        for i in range(n):
            _row_dists(g, i, row)
            c = 0
            for j in range(n):
                if row[j] <= radius:
                    c += 1
            out[i] = c
        return out

    def _density_numba(g, radius):
        return _density_kernel(np.ascontiguousarray(g, dtype=np.float64), float(radius))

    numba_impl = SimpleNamespace(
        name="numba",
        svd3=_svd3_numba,
        nearest=_nearest_numba,
        kth_neighbor_distance=_kth_neighbor_numba,
        density=_density_numba,
    )


def _select_backend():
    flag = os.environ.get("PRIMSEG_NUMBA", "1").strip().lower()
    if numba_impl is not None and flag not in ("0", "false", "no", "off"):
        return numba_impl
    return numpy_impl


backend = _select_backend()


def svd3(m):
    """Batched 3x3 SVD.  ``m`` is (B, 3, 3); returns ``u, s, v`` with
    ``m[i] = u[i] @ diag(s[i]) @ v[i].T`` and ``s`` descending."""
    return backend.svd3(m)


def nearest(queries, points):
    """Index and squared distance of the nearest ``points`` row per query."""
    return backend.nearest(queries, points)


def kth_neighbor_distance(z, k):
    """Per-row Euclidean distance to the k-th nearest other row."""
    return backend.kth_neighbor_distance(z, k)


def density(g, radius):
    """Per-row count of rows (self included) within ``radius``."""
    return backend.density(g, radius)
