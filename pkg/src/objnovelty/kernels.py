"""Gradient-free numeric kernels: balanced Sinkhorn scaling, bilinear grid
resampling and the Mann-Whitney rank sum.

Each kernel exists twice: an explicit-loop version compiled with numba and a
vectorised numpy version. The public wrappers pick the numba path when
:data:`objnovelty._accel.NUMBA_ENABLED` is true.
"""

import numpy as np

from ._accel import NUMBA_ENABLED, njit

__all__ = [
    "sinkhorn_scale",
    "bilinear_grid",
    "positive_rank_sum",
    "sinkhorn_scale_numpy",
    "sinkhorn_scale_numba",
    "bilinear_grid_numpy",
    "bilinear_grid_numba",
    "positive_rank_sum_numpy",
    "positive_rank_sum_numba",
]


# --------------------------------------------------------------------------
# Sinkhorn
# --------------------------------------------------------------------------


def sinkhorn_scale_numpy(logits, n_iters, tol):
    """Alternating column/row scaling of ``exp(logits)``.

    Returns ``(q, residual, iterations)`` where rows of ``q`` sum to one and
    ``residual`` is the largest deviation of a column sum from ``N / K``.
    ``tol <= 0`` disables early stopping.
    """
    n, k = logits.shape
    q = np.exp(logits - logits.max())
    q /= q.sum()
    residual = np.inf
    it = 0
    while it < n_iters:
        q /= q.sum(axis=0, keepdims=True) * k
        q /= q.sum(axis=1, keepdims=True) * n
        it += 1
        residual = np.abs(q.sum(axis=0) * n - n / k).max()
        if tol > 0 and residual <= tol:
            break
    return q * n, float(residual), it


@njit
def sinkhorn_scale_numba(logits, n_iters, tol):
    n, k = logits.shape
    q = np.empty((n, k))
    mx = logits[0, 0]
    for i in range(n):
        for j in range(k):
            if logits[i, j] > mx:
                mx = logits[i, j]
    total = 0.0
    for i in range(n):
        for j in range(k):
            q[i, j] = np.exp(logits[i, j] - mx)
            total += q[i, j]
    for i in range(n):
        for j in range(k):
            q[i, j] /= total
    col = np.empty(k)
    residual = np.inf
    it = 0
    while it < n_iters:
        col[:] = 0.0
        for i in range(n):
            for j in range(k):
                col[j] += q[i, j]
        for i in range(n):
            for j in range(k):
                q[i, j] /= col[j] * k
        col[:] = 0.0
        for i in range(n):
            s = 0.0
            for j in range(k):
                s += q[i, j]
            for j in range(k):
                q[i, j] /= s * n
                col[j] += q[i, j]
        it += 1
        residual = 0.0
        for j in range(k):
            d = abs(col[j] * n - n / k)
            if d > residual:
                residual = d
        if tol > 0 and residual <= tol:
            break
    for i in range(n):
        for j in range(k):
            q[i, j] *= n
    return q, residual, it


def sinkhorn_scale(logits, n_iters, tol=0.0):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    if NUMBA_ENABLED:
        q, residual, it = sinkhorn_scale_numba(logits, int(n_iters), float(tol))
        return q, float(residual), int(it)
    return sinkhorn_scale_numpy(logits, int(n_iters), float(tol))


# --------------------------------------------------------------------------
# Bilinear resampling of a (rows, cols, K) map at fractional grid coordinates
# --------------------------------------------------------------------------


def _axis_weights(coords, size):
    c = np.clip(coords, 0.0, size - 1)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = c - lo
    return lo, hi, frac


def bilinear_grid_numpy(grid, ys, xs):
    rows, cols, _ = grid.shape
    y0, y1, fy = _axis_weights(np.asarray(ys, dtype=np.float64), rows)
    x0, x1, fx = _axis_weights(np.asarray(xs, dtype=np.float64), cols)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = grid[y0][:, x0] * (1.0 - fx) + grid[y0][:, x1] * fx
    bottom = grid[y1][:, x0] * (1.0 - fx) + grid[y1][:, x1] * fx
    return top * (1.0 - fy) + bottom * fy


@njit
def bilinear_grid_numba(grid, ys, xs):
    rows, cols, k = grid.shape
    out = np.empty((ys.shape[0], xs.shape[0], k))
    for a in range(ys.shape[0]):
        y = min(max(ys[a], 0.0), rows - 1.0)
        y0 = int(np.floor(y))
        y1 = min(y0 + 1, rows - 1)
        fy = y - y0
        for b in range(xs.shape[0]):
            x = min(max(xs[b], 0.0), cols - 1.0)
            x0 = int(np.floor(x))
            x1 = min(x0 + 1, cols - 1)
            fx = x - x0
            for c in range(k):
                top = grid[y0, x0, c] * (1.0 - fx) + grid[y0, x1, c] * fx
                bottom = grid[y1, x0, c] * (1.0 - fx) + grid[y1, x1, c] * fx
                out[a, b, c] = top * (1.0 - fy) + bottom * fy
    return out


def bilinear_grid(grid, ys, xs):
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    if NUMBA_ENABLED:
        return bilinear_grid_numba(grid, ys, xs)
    return bilinear_grid_numpy(grid, ys, xs)


# --------------------------------------------------------------------------
# Rank sum of the positive class (ties get average ranks)
# --------------------------------------------------------------------------


def positive_rank_sum_numpy(scores, positive):
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    # boundaries of tie runs in sorted order
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    return float(ranks[positive].sum())


@njit
def positive_rank_sum_numba(scores, positive):
    n = scores.shape[0]
    order = np.argsort(scores, kind="mergesort")
    total = 0.0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg = (i + j + 2) / 2.0
        for t in range(i, j + 1):
            if positive[order[t]]:
                total += avg
        i = j + 1
    return total


def positive_rank_sum(scores, positive):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    positive = np.ascontiguousarray(positive, dtype=np.bool_)
    if NUMBA_ENABLED:
        return float(positive_rank_sum_numba(scores, positive))
    return positive_rank_sum_numpy(scores, positive)
