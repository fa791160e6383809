"""Evaluation: ROC AUC, percentile bootstrap, confusion-based rates and trace tables."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .domain import CANONICAL_ORDER, ENGINE_ORDER, ExamKind

BOOT_TRIALS = 2000
BOOT_SAMPLE = 2500


@dataclass
class MetricReport:
    metric: str
    point: float | None
    ci_low: float | None
    ci_high: float | None
    n_trials: int
    sample_size: int
    redraws: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def roc_auc(scores, labels):
    """Area under the ROC curve with tied scores counted as half (Mann-Whitney U / n1 n0).

    2-D inputs are evaluated row by row; a row without both classes gives NaN.
    A 1-D input without both classes raises ``ValueError``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in shape")
    if s.ndim == 1:
        n1 = int(y.sum())
        n0 = y.shape[0] - n1
        if n1 == 0 or n0 == 0:
            raise ValueError("roc_auc needs both classes present")
        r = rankdata(s)
        return float((r[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))
    r = rankdata(s, axis=-1)
    n1 = y.sum(axis=-1)
    n0 = y.shape[-1] - n1
    u = np.where(y, r, 0.0).sum(axis=-1) - n1 * (n1 + 1) / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where((n1 > 0) & (n0 > 0), u / (n1 * n0), np.nan)


roc_auc.vectorized = True


def _canonical(columns):
    cols = [np.asarray(c) for c in columns]
    n = cols[0].shape[0]
    if any(c.shape[0] != n for c in cols):
        raise ValueError("bootstrap columns differ in length")
    order = np.lexsort(tuple(reversed(cols)))
    return [c[order] for c in cols], n


def bootstrap_values(
    metric: Callable,
    items: Sequence,
    n_trials: int = BOOT_TRIALS,
    sample_size: int = BOOT_SAMPLE,
    seed: int = 0,
    max_redraws: int = 1000,
) -> tuple[np.ndarray, int]:
    """Metric values over ``n_trials`` resamples (with replacement) of ``sample_size`` items.

    ``items`` is a tuple of equal-length columns passed to ``metric`` in
    order. Rows are sorted before resampling so the result does not depend on
    input order. Trial ``t`` draws from ``default_rng([seed, t])``. A
    resample on which the metric fails (exception or NaN) is redrawn; the
    total number of redraws is returned and capped by ``max_redraws``.
    """
    cols, n = _canonical(items)
    if n == 0:
        raise ValueError("bootstrap needs at least one item")
    rngs = [np.random.default_rng([seed, t]) for t in range(n_trials)]
    idx = np.stack([g.integers(0, n, size=sample_size) for g in rngs])
    redraws = 0
    if getattr(metric, "vectorized", False):
        vals = np.asarray(metric(*(c[idx] for c in cols)), dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(vals))
    else:
        vals = np.empty(n_trials)
        bad = []
        for t in range(n_trials):
            try:
                vals[t] = metric(*(c[idx[t]] for c in cols))
            except (ValueError, ZeroDivisionError):
                vals[t] = np.nan
            if not np.isfinite(vals[t]):
                bad.append(t)
    for t in bad:
        while True:
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError(f"metric failed on more than {max_redraws} redraws")
            i = rngs[t].integers(0, n, size=sample_size)
            try:
                v = float(metric(*(c[i] for c in cols)))
            except (ValueError, ZeroDivisionError):
                continue
            if np.isfinite(v):
                vals[t] = v
                break
    return vals, redraws


def bootstrap_ci(
    metric: Callable,
    items: Sequence,
    n_trials: int = BOOT_TRIALS,
    sample_size: int = BOOT_SAMPLE,
    seed: int = 0,
) -> tuple[float, float]:
    """2.5 and 97.5 percentiles of the bootstrap metric distribution."""
    vals, _ = bootstrap_values(metric, items, n_trials, sample_size, seed)
    lo, hi = np.percentile(vals, [2.5, 97.5])
    return float(lo), float(hi)


def metric_report(name, metric, items, n_trials=BOOT_TRIALS, sample_size=BOOT_SAMPLE, seed=0) -> MetricReport:
    try:
        point = float(metric(*items))
    except (ValueError, ZeroDivisionError):
        point = None
    if point is None or not np.isfinite(point):
        return MetricReport(name, None, None, None, n_trials, sample_size)
    vals, redraws = bootstrap_values(metric, items, n_trials, sample_size, seed)
    lo, hi = np.percentile(vals, [2.5, 97.5])
    return MetricReport(name, point, float(lo), float(hi), n_trials, sample_size, redraws)


def sensitivity_specificity(preds, truths, positive) -> tuple[float | None, float | None]:
    """One-vs-rest sensitivity and specificity; ``None`` where a denominator is zero."""
    p = np.asarray([str(getattr(x, "value", x)) for x in preds])
    t = np.asarray([str(getattr(x, "value", x)) for x in truths])
    if p.shape[0] == 0 or p.shape != t.shape:
        raise ValueError("preds and truths must be nonempty and aligned")
    pos = str(getattr(positive, "value", positive))
    tp = int(np.sum((p == pos) & (t == pos)))
    fn = int(np.sum((p != pos) & (t == pos)))
    tn = int(np.sum((p != pos) & (t != pos)))
    fp = int(np.sum((p == pos) & (t != pos)))
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    return sens, spec


def accuracy(preds, truths) -> float:
    p = [str(getattr(x, "value", x)) for x in preds]
    t = [str(getattr(x, "value", x)) for x in truths]
    if not p:
        raise ValueError("empty input")
    return sum(a == b for a, b in zip(p, t)) / len(p)


# --------------------------------------------------------------------------
# trace tables
# --------------------------------------------------------------------------


def exam_usage_table(traces) -> dict:
    """Per-kind request / grant / refusal totals over all traces."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces")
    table = {k: {"requests": 0, "grants": 0, "refusals": 0} for k in CANONICAL_ORDER}
    for t in traces:
        for _, kind, ok in t.requested:
            row = table[kind]
            row["requests"] += 1
            row["grants" if ok else "refusals"] += 1
    return table


def strategy_census(traces) -> list[dict]:
    """Distinct granted-exam sets, counts per final label, most frequent first."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces")
    counts: dict[frozenset, Counter] = {}
    for t in traces:
        counts.setdefault(t.granted, Counter())[t.final.cls] += 1
    rows = []
    for s, c in counts.items():
        rows.append(
            {
                "strategy": [k.name for k in sorted(s)],
                "total": sum(c.values()),
                **{lab.value: c.get(lab, 0) for lab in ENGINE_ORDER},
            }
        )
    rows.sort(key=lambda r: (-r["total"], len(r["strategy"]), [ExamKind[k] for k in r["strategy"]]))
    return rows


def format_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    rows = [[str(x) for x in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(x.rjust(w) for x, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


def format_usage(table: dict) -> str:
    kinds = list(table)
    return format_table(
        ["", *[k.name for k in kinds]],
        [
            ["requests", *[table[k]["requests"] for k in kinds]],
            ["grants", *[table[k]["grants"] for k in kinds]],
            ["refusals", *[table[k]["refusals"] for k in kinds]],
        ],
    )


def format_census(rows: list[dict]) -> str:
    return format_table(
        ["strategy", "total", *[lab.value for lab in ENGINE_ORDER]],
        [["+".join(r["strategy"]), r["total"], *[r[lab.value] for lab in ENGINE_ORDER]] for r in rows],
    )
