"""Hot numeric kernels: farthest-point sampling, oriented-box containment
counting, nearest-neighbour distances and fused max-pool/argmax.

Each kernel has a numba @njit implementation and a pure-numpy fallback with
identical semantics (including argmax tie-breaking to the first index).
Set POSEREFINE_NUMBA=0 to force the numpy path; the default uses numba when
it imports cleanly. `backend()` reports which path is active.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

_WANT_NUMBA = os.environ.get("POSEREFINE_NUMBA", "1") != "0"
_HAVE_NUMBA = False

if _WANT_NUMBA:
    try:
        from numba import njit, prange
        from numba.core.errors import NumbaWarning

        # the TBB version probe warns once per process; the omp fallback is fine
        warnings.filterwarnings("ignore", category=NumbaWarning)
        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _HAVE_NUMBA = False


def backend() -> str:
    return "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# farthest point sampling


def _fps_numpy(pts: np.ndarray, k: int, start: int) -> np.ndarray:
    n = pts.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    d = pts - pts[start]
    best = (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2]
    for i in range(1, k):
        nxt = int(np.argmax(best))
        chosen[i] = nxt
        d = pts - pts[nxt]
        cand = (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2]
        np.minimum(best, cand, out=best)
    return chosen


if _HAVE_NUMBA:

    @njit(cache=True)
    def _fps_numba(pts, k, start):  # pragma: no cover - jitted
        n = pts.shape[0]
        chosen = np.empty(k, dtype=np.int64)
        chosen[0] = start
        best = np.empty(n, dtype=pts.dtype)
        for j in range(n):
            dx = pts[j, 0] - pts[start, 0]
            dy = pts[j, 1] - pts[start, 1]
            dz = pts[j, 2] - pts[start, 2]
            best[j] = (dx * dx + dy * dy) + dz * dz
        for i in range(1, k):
            nxt = 0
            mx = best[0]
            for j in range(1, n):
                if best[j] > mx:
                    mx = best[j]
                    nxt = j
            chosen[i] = nxt
            for j in range(n):
                dx = pts[j, 0] - pts[nxt, 0]
                dy = pts[j, 1] - pts[nxt, 1]
                dz = pts[j, 2] - pts[nxt, 2]
                c = (dx * dx + dy * dy) + dz * dz
                if c < best[j]:
                    best[j] = c
        return chosen


def fps_indices(pts: np.ndarray, k: int, start: int) -> np.ndarray:
    """Greedy max-min-distance subset of k point indices, seeded at `start`."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if _HAVE_NUMBA:
        return _fps_numba(pts, k, start)
    return _fps_numpy(pts, k, start)


# ---------------------------------------------------------------------------
# oriented-box containment counting (Monte-Carlo IoU)


def _obb_counts_numpy(pts, ra, ta, sa, rb, tb, sb):
    ua = np.abs((pts - ta) @ ra)  # ra columns are box axes
    ub = np.abs((pts - tb) @ rb)
    in_a = np.all(ua <= sa * 0.5, axis=1)
    in_b = np.all(ub <= sb * 0.5, axis=1)
    inter = int(np.count_nonzero(in_a & in_b))
    union = int(np.count_nonzero(in_a | in_b))
    return union, inter


if _HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _obb_counts_numba(pts, ra, ta, sa, rb, tb, sb):  # pragma: no cover
        n = pts.shape[0]
        inter = 0
        union = 0
        ha0, ha1, ha2 = sa[0] * 0.5, sa[1] * 0.5, sa[2] * 0.5
        hb0, hb1, hb2 = sb[0] * 0.5, sb[1] * 0.5, sb[2] * 0.5
        for i in prange(n):
            d0 = pts[i, 0] - ta[0]
            d1 = pts[i, 1] - ta[1]
            d2 = pts[i, 2] - ta[2]
            in_a = (
                abs(d0 * ra[0, 0] + d1 * ra[1, 0] + d2 * ra[2, 0]) <= ha0
                and abs(d0 * ra[0, 1] + d1 * ra[1, 1] + d2 * ra[2, 1]) <= ha1
                and abs(d0 * ra[0, 2] + d1 * ra[1, 2] + d2 * ra[2, 2]) <= ha2
            )
            e0 = pts[i, 0] - tb[0]
            e1 = pts[i, 1] - tb[1]
            e2 = pts[i, 2] - tb[2]
            in_b = (
                abs(e0 * rb[0, 0] + e1 * rb[1, 0] + e2 * rb[2, 0]) <= hb0
                and abs(e0 * rb[0, 1] + e1 * rb[1, 1] + e2 * rb[2, 1]) <= hb1
                and abs(e0 * rb[0, 2] + e1 * rb[1, 2] + e2 * rb[2, 2]) <= hb2
            )
            if in_a and in_b:
                inter += 1
            if in_a or in_b:
                union += 1
        return union, inter


def obb_pair_counts(pts, ra, ta, sa, rb, tb, sb):
    """Count sample points inside the union and intersection of two OBBs.

    A box is {R @ (s * u) + t : u in [-1/2, 1/2]^3}; a point q is inside iff
    |R^T (q - t)| <= s/2 component-wise.
    """
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (ra, ta, sa, rb, tb, sb)]
    if _HAVE_NUMBA:
        return _obb_counts_numba(pts, *args)
    return _obb_counts_numpy(pts, *args)


# ---------------------------------------------------------------------------
# nearest-neighbour distances (ADD-S)


def _nn_min_numpy(a, b):
    out = np.empty(a.shape[0], dtype=np.float64)
    # blockwise to bound the (N, M) temporary
    step = max(1, 2_000_000 // max(b.shape[0], 1))
    for i in range(0, a.shape[0], step):
        blk = a[i : i + step]
        d2 = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        out[i : i + step] = np.sqrt(d2.min(axis=1))
    return out


if _HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _nn_min_numba(a, b):  # pragma: no cover - jitted
        n = a.shape[0]
        m = b.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in prange(n):
            best = np.inf
            for j in range(m):
                dx = a[i, 0] - b[j, 0]
                dy = a[i, 1] - b[j, 1]
                dz = a[i, 2] - b[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
            out[i] = np.sqrt(best)
        return out


def nn_min_dists(a, b):
    """For each point of `a`, the Euclidean distance to its nearest point in `b`."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if _HAVE_NUMBA:
        return _nn_min_numba(a, b)
    return _nn_min_numpy(a, b)


# ---------------------------------------------------------------------------
# fused max-pool with argmax over the middle axis of (B, N, C)


def _maxpool_numpy(x):
    return x.max(axis=1), x.argmax(axis=1).astype(np.int64)


if _HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _maxpool_numba(x):  # pragma: no cover - jitted
        b, n, c = x.shape
        vals = np.empty((b, c), dtype=x.dtype)
        idx = np.zeros((b, c), dtype=np.int64)
        for bi in prange(b):
            for ci in range(c):
                vals[bi, ci] = x[bi, 0, ci]
            for ni in range(1, n):
                for ci in range(c):
                    v = x[bi, ni, ci]
                    if v > vals[bi, ci]:
                        vals[bi, ci] = v
                        idx[bi, ci] = ni
        return vals, idx


def maxpool_argmax(x: np.ndarray):
    """Max over axis 1 of a (B, N, C) array plus the argmax indices.

    Ties resolve to the lowest index, matching numpy argmax.
    """
    x = np.ascontiguousarray(x)
    if _HAVE_NUMBA:
        return _maxpool_numba(x)
    return _maxpool_numpy(x)
