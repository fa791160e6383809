"""Hot numeric kernels.

Every kernel exists twice: an explicit-loop version compiled with numba's
``@njit`` and a vectorised numpy version. The module-level names pick the
jitted variant when numba imports and ``OPENCLINICAL_DISABLE_NUMBA`` is unset
(or ``0``); both variants stay importable under ``*_loop`` / ``*_numpy`` so the
tests and the benchmark can compare them directly.
"""

import os

import numpy as np

try:
    from numba import njit

    NUMBA_INSTALLED = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_INSTALLED = False

USE_NUMBA = NUMBA_INSTALLED and os.environ.get("OPENCLINICAL_DISABLE_NUMBA", "0") in ("", "0")


def optional_njit(*args, **kwargs):
    def decorator(func):
        if NUMBA_INSTALLED:
            return njit(*args, **kwargs)(func)
        return func

    return decorator


# --------------------------------------------------------------------------
# strict-subset pair rewards
# --------------------------------------------------------------------------


def _reward_pairs_py(masks, preds, y):
    n = masks.shape[0]
    n_cls = preds.shape[1]
    cap = n * (n - 1) // 2
    q_out = np.empty(cap, dtype=np.int64)
    v_out = np.empty(cap, dtype=np.int64)
    r_out = np.empty(cap, dtype=np.float64)
    m = 0
    for q in range(n):
        mq = masks[q]
        for v in range(q + 1, n):
            mv = masks[v]
            if (mq & mv) != mq or mq == mv:
                continue
            gain = 0.0
            loss = 0.0
            for j in range(n_cls):
                gain += y[j] * preds[v, j] - y[j] * preds[q, j]
                loss += (1.0 - y[j]) * preds[q, j] - (1.0 - y[j]) * preds[v, j]
            r = gain + loss
            if r > 0.0:
                q_out[m] = q
                v_out[m] = v
                r_out[m] = r
                m += 1
    return q_out[:m], v_out[:m], r_out[:m]


reward_pairs_loop = optional_njit(cache=True)(_reward_pairs_py)


def reward_pairs_numpy(masks, preds, y):
    """Vectorised twin of :func:`reward_pairs_loop` (row-major pair order)."""
    masks = np.asarray(masks, dtype=np.int64)
    n = masks.shape[0]
    q, v = np.triu_indices(n, k=1)
    mq, mv = masks[q], masks[v]
    keep = ((mq & mv) == mq) & (mq != mv)
    q, v = q[keep], v[keep]
    pq, pv = preds[q], preds[v]
    gain = np.zeros(q.shape[0])
    loss = np.zeros(q.shape[0])
    # column-by-column accumulation mirrors the loop's summation order
    for j in range(preds.shape[1]):
        gain = gain + (y[j] * pv[:, j] - y[j] * pq[:, j])
        loss = loss + ((1.0 - y[j]) * pq[:, j] - (1.0 - y[j]) * pv[:, j])
    r = gain + loss
    pos = r > 0.0
    return q[pos].astype(np.int64), v[pos].astype(np.int64), r[pos]


# --------------------------------------------------------------------------
# nearest-center search
# --------------------------------------------------------------------------


def _nearest_center_py(X, C):
    n, d = X.shape
    k = C.shape[0]
    idx = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    for i in range(n):
        b = np.inf
        bi = 0
        for c in range(k):
            s = 0.0
            for t in range(d):
                diff = X[i, t] - C[c, t]
                s += diff * diff
            if s < b:
                b = s
                bi = c
        idx[i] = bi
        best[i] = b
    return idx, best


nearest_center_loop = optional_njit(cache=True)(_nearest_center_py)


def nearest_center_numpy(X, C):
    """Index of and squared distance to the nearest row of ``C`` for each row of ``X``."""
    d2 = np.empty((X.shape[0], C.shape[0]))
    for c in range(C.shape[0]):
        diff = X - C[c]
        d2[:, c] = np.einsum("ij,ij->i", diff, diff)
    idx = np.argmin(d2, axis=1).astype(np.int64)
    return idx, d2[np.arange(X.shape[0]), idx]


# --------------------------------------------------------------------------
# per-center learning-rate updates
# --------------------------------------------------------------------------


def _center_update_py(centers, counts, batch, assign):
    for j in range(batch.shape[0]):
        c = assign[j]
        counts[c] += 1.0
        eta = 1.0 / counts[c]
        for t in range(batch.shape[1]):
            centers[c, t] = (1.0 - eta) * centers[c, t] + eta * batch[j, t]


center_update_loop = optional_njit(cache=True)(_center_update_py)


def center_update_numpy(centers, counts, batch, assign):
    """Closed form of the sequential 1/count updates: a running mean per center."""
    k = centers.shape[0]
    add_n = np.bincount(assign, minlength=k).astype(np.float64)
    add_sum = np.zeros_like(centers)
    np.add.at(add_sum, assign, batch)
    hit = add_n > 0
    new_n = counts + add_n
    centers[hit] = (counts[hit, None] * centers[hit] + add_sum[hit]) / new_n[hit, None]
    counts[:] = new_n


# --------------------------------------------------------------------------
# Weibull shape-profile sums
# --------------------------------------------------------------------------


def _weibull_sums_py(logx, k):
    s0 = 0.0
    s1 = 0.0
    s2 = 0.0
    for i in range(logx.shape[0]):
        lx = logx[i]
        w = np.exp(k * lx)
        s0 += w
        s1 += w * lx
        s2 += w * lx * lx
    return s0, s1, s2


weibull_sums_loop = optional_njit(cache=True)(_weibull_sums_py)


def weibull_sums_numpy(logx, k):
    """Return (sum x^k, sum x^k ln x, sum x^k ln^2 x) given ln x."""
    w = np.exp(k * logx)
    wl = w * logx
    return float(w.sum()), float(wl.sum()), float((wl * logx).sum())


if USE_NUMBA:
    reward_pairs = reward_pairs_loop
    nearest_center = nearest_center_loop
    center_update = center_update_loop
    weibull_sums = weibull_sums_loop
else:
    reward_pairs = reward_pairs_numpy
    nearest_center = nearest_center_numpy
    center_update = center_update_numpy
    weibull_sums = weibull_sums_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
