"""Mini-batch k-means and the nearest-center distances used by OpenMax calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class CenterSet:
    centers: np.ndarray

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("centers must be a nonempty 2-D array")
        if not np.all(np.isfinite(c)):
            raise ValueError("centers must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def to_list(self) -> list:
        return self.centers.tolist()

    @classmethod
    def from_list(cls, rows) -> "CenterSet":
        return cls(np.asarray(rows, dtype=np.float64))

    @classmethod
    def union(cls, sets) -> "CenterSet":
        return cls(np.vstack([s.centers for s in sets]))


def inertia(data, centers) -> float:
    """Sum of squared distances to the nearest center."""
    _, d2 = _kernels.nearest_center(np.ascontiguousarray(data, dtype=np.float64), np.ascontiguousarray(centers))
    return float(d2.sum())


def kmeans_plus_plus(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((data - data[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every remaining point duplicates a chosen one; pick an unchosen index
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[rng.integers(free.shape[0])])
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((data - data[nxt]) ** 2, axis=1))
    return data[chosen].copy()


def _fix_empty(data, centers, assign):
    k = centers.shape[0]
    sizes = np.bincount(assign, minlength=k)
    for c in np.flatnonzero(sizes == 0):
        big = int(np.argmax(sizes))
        members = np.flatnonzero(assign == big)
        far = members[np.argmax(np.sum((data[members] - centers[big]) ** 2, axis=1))]
        centers[c] = data[far]
        assign[far] = c
        sizes[big] -= 1
        sizes[c] = 1
    return assign


def minibatch_kmeans(
    data,
    k: int,
    batch: int = 256,
    epochs: int = 20,
    seed: int = 0,
    history: list | None = None,
) -> CenterSet:
    """Cluster ``data`` into ``k`` centers.

    Centers start from k-means++ sampling. Each epoch visits the shuffled data
    in mini-batches; a batch is assigned to the centers as they stand at the
    batch start, then each point moves its center with learning rate
    ``1/count``. Counts persist across epochs (Sculley's web-scale rule).

    When ``batch >= len(data)`` the counts restart every epoch, which makes
    each epoch an exact Lloyd step (centers become the means of their
    assigned points). Empty clusters in that mode take the farthest point of
    the largest cluster.

    If ``history`` is given, the inertia after every epoch is appended to it.
    """
    data = np.ascontiguousarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be a 2-D array")
    n = data.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus(data, k, rng)
    counts = np.zeros(k)
    full = batch >= n
    for _ in range(epochs):
        if full:
            assign, _ = _kernels.nearest_center(data, centers)
            assign = _fix_empty(data, centers, assign.copy())
            counts[:] = 0.0
            _kernels.center_update(centers, counts, data, assign)
        else:
            order = rng.permutation(n)
            for start in range(0, n, batch):
                mb = data[order[start : start + batch]]
                assign, _ = _kernels.nearest_center(mb, centers)
                _kernels.center_update(centers, counts, mb, assign)
        if history is not None:
            history.append(inertia(data, centers))
    return CenterSet(centers)


def _as_query(x, c: CenterSet) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != c.dim:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {c.dim}")
    return np.ascontiguousarray(np.atleast_2d(x))


def min_distance(x, c: CenterSet):
    """Euclidean distance from ``x`` (one vector or a matrix of rows) to the nearest center."""
    q = _as_query(x, c)
    _, d2 = _kernels.nearest_center(q, np.ascontiguousarray(c.centers))
    d = np.sqrt(d2)
    return float(d[0]) if np.ndim(x) == 1 else d


def composite_distance(x, own: CenterSet, others: CenterSet):
    """``sqrt(d_own**2 + (1 - d_other)**2)`` with nearest-center distances."""
    d_own = min_distance(x, own)
    d_oth = min_distance(x, others)
    d = np.sqrt(np.square(d_own) + np.square(1.0 - d_oth))
    return float(d) if np.ndim(x) == 1 else d


def unit_rows(x) -> np.ndarray:
    """Scale rows to unit Euclidean norm (zero rows stay zero)."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)
