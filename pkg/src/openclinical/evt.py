"""Weibull tail models: upper-tail maximum-likelihood fit and the CDF score."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

MAX_ITER = 200
RESIDUAL_TOL = 1e-10
TAU_EPS = 1e-6


class WeibullFitError(ValueError):
    """Raised when a tail cannot be fitted. ``last`` holds the final shape iterate, if any."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True)
class WeibullTailModel:
    tau: float
    lam: float
    kappa: float
    tail_size: int

    def __post_init__(self):
        if not (self.lam > 0 and self.kappa > 0):
            raise ValueError("scale and shape must be positive")
        if self.tail_size < 2:
            raise ValueError("tail_size must be at least 2")

    def w_score(self, x):
        return w_score(self, x)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "lambda": self.lam, "kappa": self.kappa, "tail_size": self.tail_size}

    @classmethod
    def from_dict(cls, d: dict) -> "WeibullTailModel":
        return cls(float(d["tau"]), float(d["lambda"]), float(d["kappa"]), int(d["tail_size"]))


def default_tail_size(n: int) -> int:
    return min(20, math.ceil(n / 2))


def w_score(m: WeibullTailModel, x):
    """Weibull CDF of ``x`` under ``m``; 0 at or below the location."""
    z = np.maximum(np.asarray(x, dtype=np.float64) - m.tau, 0.0) / m.lam
    out = -np.expm1(-(z**m.kappa))
    return float(out) if out.ndim == 0 else out


def log_likelihood(x, kappa: float, lam: float) -> float:
    """Two-parameter Weibull log-likelihood of positive samples ``x``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    lx = np.log(x)
    return float(
        n * math.log(kappa) - n * kappa * math.log(lam) + (kappa - 1.0) * lx.sum() - np.sum(np.exp(kappa * (lx - math.log(lam))))
    )


def _profile(logy, k, n, sum_log):
    s0, s1, s2 = _kernels.weibull_sums(logy, k)
    a = s1 / s0
    resid = a - 1.0 / k - sum_log / n
    slope = (s2 / s0 - a * a) + 1.0 / (k * k)
    ll = n * math.log(k) - n * math.log(s0 / n) + (k - 1.0) * sum_log - n
    return resid, slope, ll, s0


def fit_shape_scale(x, k0: float | None = None) -> tuple[float, float]:
    """Maximum-likelihood (shape, scale) of a two-parameter Weibull on positive ``x``.

    Damped Newton on the shape profile equation; the step is halved while it
    lowers the profile log-likelihood.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    s = float(x.max())
    logy = np.log(x / s)
    sum_log = float(logy.sum())
    if k0 is None:
        sd = float(np.std(logy))
        k0 = math.pi / (math.sqrt(6.0) * sd) if sd > 0 else 1.0
    k = k0
    resid, slope, ll, s0 = _profile(logy, k, n, sum_log)
    for _ in range(MAX_ITER):
        if abs(resid) < RESIDUAL_TOL:
            return k, s * (s0 / n) ** (1.0 / k)
        step = -resid / slope
        for _ in range(60):
            k_new = k + step
            if k_new > 0:
                r_new, sl_new, ll_new, s0_new = _profile(logy, k_new, n, sum_log)
                if ll_new >= ll - 1e-13 * abs(ll):
                    break
            step *= 0.5
        else:
            raise WeibullFitError("shape update stalled", last=k)
        k, resid, slope, ll, s0 = k_new, r_new, sl_new, ll_new, s0_new
    if abs(resid) < RESIDUAL_TOL:
        return k, s * (s0 / n) ** (1.0 / k)
    raise WeibullFitError(f"no convergence after {MAX_ITER} iterations (residual {resid:.3e})", last=k)


def fit_high(samples, tail_size: int | None = None) -> WeibullTailModel:
    """Fit a Weibull to the ``tail_size`` largest samples.

    The location is placed just below the smallest tail sample,
    ``tau = min(tail) - 1e-6 * (max(tail) - min(tail))``, so every tail point
    has positive support; shape and scale are then the maximum-likelihood
    estimates on ``tail - tau``.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if tail_size is None:
        tail_size = default_tail_size(x.shape[0])
    if tail_size < 2:
        raise ValueError("tail_size must be at least 2")
    if tail_size > x.shape[0]:
        raise ValueError(f"tail_size {tail_size} exceeds the {x.shape[0]} samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    tail = np.sort(x)[-tail_size:]
    spread = float(tail[-1] - tail[0])
    if spread <= 0.0:
        raise WeibullFitError("zero-variance tail")
    tau = float(tail[0]) - TAU_EPS * spread
    if tail[0] - tau <= 0.0:
        tau = float(np.nextafter(tail[0], -np.inf))
    kappa, lam = fit_shape_scale(tail - tau)
    return WeibullTailModel(tau=tau, lam=lam, kappa=kappa, tail_size=tail_size)
