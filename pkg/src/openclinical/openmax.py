"""OpenMax with multi-center classes: calibration and open-set scoring.

Calibration, per known class ``i``:

1. cluster the class's correctly classified embeddings into ``N[i]`` centers;
2. composite distance of every member to its own centers and to the union of
   the other classes' centers;
3. Weibull tail fit on those distances and the ``Q[i]`` empirical quantile
   as the abnormality threshold.

Scoring revises the top-``alpha`` activations with the tail CDF, moves the
removed mass to an unknown logit, takes a softmax over (unknown, known...)
and, when ``flag`` is set, scales each known probability down by how far its
distance exceeds the class threshold. Output order is (Unknown, AD, CN).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import clustering, evt, nn


@dataclass(frozen=True)
class OpenMaxCalibration:
    centers: tuple  # CenterSet per class
    models: tuple  # WeibullTailModel per class
    thresholds: np.ndarray
    quantiles: np.ndarray
    alpha: int
    flag: bool = True
    classic_weights: bool = False
    normalize: str = "none"
    scale: float = 1.0

    def __post_init__(self):
        L = len(self.centers)
        norm = _norm_mode(self.normalize)
        object.__setattr__(self, "normalize", norm)
        if not self.scale > 0:
            raise ValueError("embedding scale must be positive")
        if len(self.models) != L or len(self.thresholds) != L:
            raise ValueError("per-class fields must all have L entries")
        if not 1 <= self.alpha <= L:
            raise ValueError(f"alpha must lie in [1, {L}]")
        object.__setattr__(self, "thresholds", np.asarray(self.thresholds, dtype=np.float64))
        object.__setattr__(self, "quantiles", np.asarray(self.quantiles, dtype=np.float64))

    @property
    def n_classes(self) -> int:
        return len(self.centers)

    def transform(self, embeddings) -> np.ndarray:
        """Map raw embeddings into the space the centers live in."""
        E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if self.normalize == "unit":
            return clustering.unit_rows(E)
        if self.normalize == "scale":
            return E / self.scale
        return E

    def others(self, i: int) -> clustering.CenterSet:
        return clustering.CenterSet.union([c for j, c in enumerate(self.centers) if j != i])

    def to_dict(self) -> dict:
        return {
            "centers": [c.to_list() for c in self.centers],
            "models": [m.to_dict() for m in self.models],
            "thresholds": self.thresholds.tolist(),
            "quantiles": self.quantiles.tolist(),
            "alpha": self.alpha,
            "flag": self.flag,
            "classic_weights": self.classic_weights,
            "normalize": self.normalize,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OpenMaxCalibration":
        return cls(
            centers=tuple(clustering.CenterSet.from_list(c) for c in d["centers"]),
            models=tuple(evt.WeibullTailModel.from_dict(m) for m in d["models"]),
            thresholds=np.asarray(d["thresholds"]),
            quantiles=np.asarray(d["quantiles"]),
            alpha=int(d["alpha"]),
            flag=bool(d["flag"]),
            classic_weights=bool(d.get("classic_weights", False)),
            normalize=d.get("normalize", "none"),
            scale=float(d.get("scale", 1.0)),
        )


NORMALIZE_MODES = ("none", "unit", "scale")


def _norm_mode(value) -> str:
    if value is True:
        return "unit"
    if value is False or value is None:
        return "none"
    if value not in NORMALIZE_MODES:
        raise ValueError(f"normalize must be one of {NORMALIZE_MODES}")
    return value


def class_mean_spread(per_class: Sequence[np.ndarray]) -> float:
    """Mean pairwise Euclidean distance between the class means."""
    means = [x.mean(axis=0) for x in per_class]
    d = [np.linalg.norm(a - b) for i, a in enumerate(means) for b in means[i + 1 :]]
    return float(np.mean(d))


def _per_class(value, L, cast):
    if np.ndim(value) == 0:
        return [cast(value)] * L
    if len(value) != L:
        raise ValueError(f"expected {L} per-class values")
    return [cast(v) for v in value]


def class_distances(embeddings, centers: Sequence[clustering.CenterSet], i: int):
    others = clustering.CenterSet.union([c for j, c in enumerate(centers) if j != i])
    return clustering.composite_distance(np.atleast_2d(embeddings), centers[i], others)


def calibrate(
    per_class_embeddings: Sequence[np.ndarray],
    n_centers=3,
    quantile=0.95,
    tail_size: int | None = None,
    seed: int = 0,
    alpha: int | None = None,
    flag: bool = True,
    classic_weights: bool = False,
    normalize="none",
    kmeans_batch: int = 256,
    kmeans_epochs: int = 20,
) -> OpenMaxCalibration:
    """Fit centers, Weibull tail models and thresholds from per-class embeddings.

    The embeddings must come from correctly classified training samples only.
    ``normalize`` picks the embedding space: ``"none"`` (raw), ``"unit"``
    (unit-norm rows) or ``"scale"`` (divided by the mean distance between
    class means, so neighbouring classes sit about one unit apart, which is
    the scale the ``1 - d_other`` term of the composite distance assumes).
    Raises ``ValueError`` when a class has fewer than ``max(N, tail_size)``
    samples and :class:`~openclinical.evt.WeibullFitError` on a degenerate tail.
    """
    L = len(per_class_embeddings)
    if L < 2:
        raise ValueError("need at least two known classes")
    N = _per_class(n_centers, L, int)
    Q = _per_class(quantile, L, float)
    X = [np.atleast_2d(np.asarray(e, dtype=np.float64)) for e in per_class_embeddings]
    normalize = _norm_mode(normalize)
    scale = 1.0
    if normalize == "unit":
        X = [clustering.unit_rows(x) for x in X]
    elif normalize == "scale":
        if any(x.shape[0] == 0 for x in X):
            raise ValueError("every class needs samples")
        scale = class_mean_spread(X)
        if not scale > 0:
            raise ValueError("class means coincide; cannot scale embeddings")
        X = [x / scale for x in X]
    for i, x in enumerate(X):
        ts = evt.default_tail_size(x.shape[0]) if tail_size is None else tail_size
        if x.shape[0] < max(N[i], ts, 2):
            raise ValueError(f"class {i} has {x.shape[0]} samples, needs at least {max(N[i], ts, 2)}")
    centers = tuple(
        clustering.minibatch_kmeans(x, N[i], batch=kmeans_batch, epochs=kmeans_epochs, seed=seed + i)
        for i, x in enumerate(X)
    )
    models, thr = [], []
    for i, x in enumerate(X):
        dist = class_distances(x, centers, i)
        models.append(evt.fit_high(dist, tail_size))
        thr.append(float(np.quantile(dist, Q[i], method="higher")))
    return OpenMaxCalibration(
        centers=centers,
        models=tuple(models),
        thresholds=np.asarray(thr),
        quantiles=np.asarray(Q),
        alpha=L if alpha is None else alpha,
        flag=flag,
        classic_weights=classic_weights,
        normalize=normalize,
        scale=scale,
    )


def revision_weights(activation, w_scores, alpha: int, classic: bool = False) -> np.ndarray:
    """Per-class weights omega; the class at activation rank r (1-based) gets
    ``1 - (alpha - r)/alpha * w`` (or ``(alpha - r + 1)/alpha`` when ``classic``)."""
    v = np.asarray(activation, dtype=np.float64)
    w = np.asarray(w_scores, dtype=np.float64)
    omega = np.ones_like(v)
    ranked = np.argsort(-v, kind="stable")
    for r in range(1, alpha + 1):
        c = ranked[r - 1]
        factor = (alpha - r + 1) / alpha if classic else (alpha - r) / alpha
        omega[c] = 1.0 - factor * w[c]
    return omega


def openmax_from_scores(
    activation,
    w_scores,
    dist,
    thresholds,
    alpha: int,
    flag: bool,
    classic: bool = False,
) -> np.ndarray:
    """Open-set probabilities (Unknown, class 1, ..., class L) from precomputed
    tail scores and distances."""
    v = np.asarray(activation, dtype=np.float64)
    omega = revision_weights(v, w_scores, alpha, classic)
    v_hat = v * omega
    v0 = np.sum(v * (1.0 - omega))
    P = nn.softmax(np.concatenate([[v0], v_hat]))
    if flag:
        dist = np.asarray(dist, dtype=np.float64)
        thr = np.asarray(thresholds, dtype=np.float64)
        abnor = np.clip((dist - thr) / thr, 0.0, 1.0)
        P[1:] = P[1:] * (1.0 - abnor)
        P[0] = max(0.0, 1.0 - P[1:].sum())
    return P


def distances_to_classes(cal: OpenMaxCalibration, embedding) -> np.ndarray:
    """Composite distance of one embedding to every class."""
    x = cal.transform(np.asarray(embedding, dtype=np.float64).reshape(1, -1))
    return np.array([class_distances(x, cal.centers, i)[0] for i in range(cal.n_classes)])


def openmax_predict(cal: OpenMaxCalibration, activation, embedding) -> np.ndarray:
    """Open-set probability vector (Unknown, AD, CN) for one backbone output."""
    v = np.asarray(activation, dtype=np.float64).reshape(-1)
    if v.shape[0] != cal.n_classes:
        raise ValueError("activation length does not match the calibration")
    dist = distances_to_classes(cal, embedding)
    w = np.array([evt.w_score(m, d) for m, d in zip(cal.models, dist)])
    return openmax_from_scores(v, w, dist, cal.thresholds, cal.alpha, cal.flag, cal.classic_weights)


def openmax_predict_batch(cal: OpenMaxCalibration, activations, embeddings) -> np.ndarray:
    A = np.atleast_2d(activations)
    E = cal.transform(embeddings)
    D = np.stack([class_distances(E, cal.centers, i) for i in range(cal.n_classes)], axis=1)
    W = np.stack([evt.w_score(m, D[:, i]) * np.ones(D.shape[0]) for i, m in enumerate(cal.models)], axis=1)
    return np.stack(
        [
            openmax_from_scores(A[n], W[n], D[n], cal.thresholds, cal.alpha, cal.flag, cal.classic_weights)
            for n in range(A.shape[0])
        ]
    )
