"""The dynamic diagnosis loop.

Each round predicts on the data gathered so far and returns the first class
whose probability reaches its threshold (AD, CN, then Unknown). Otherwise it
requests every recommended exam the institution can run, falls back to the
cheapest untried executable exam when nothing was added, and gives up with
Unknown when even the fallback finds nothing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .domain import (
    ENGINE_ORDER,
    N_ACTIONS,
    RECOMMENDABLE,
    DiagnosisLabel,
    ExamKind,
    FeatureRow,
    Label,
    parse_kind,
)

DEFAULT_DELTA = 0.95


@dataclass(frozen=True)
class InstitutionProfile:
    executable: frozenset
    name: str = ""

    def __post_init__(self):
        ex = frozenset(parse_kind(k) for k in self.executable)
        if ExamKind.Base not in ex:
            raise ValueError("every institution can collect Base information")
        object.__setattr__(self, "executable", ex)

    def can_execute(self, kind: ExamKind) -> bool:
        return kind in self.executable

    def to_dict(self) -> dict:
        return {"name": self.name, "executable": [k.name for k in sorted(self.executable)]}

    @classmethod
    def from_dict(cls, d: dict) -> "InstitutionProfile":
        return cls(frozenset(parse_kind(k) for k in d["executable"]), d.get("name", ""))


def write_institutions(path, profiles: Iterable[InstitutionProfile]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([p.to_dict() for p in profiles], fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_institutions(path) -> list[InstitutionProfile]:
    with open(path, encoding="utf-8") as fh:
        return [InstitutionProfile.from_dict(d) for d in json.load(fh)]


@dataclass
class EngineConfig:
    delta: tuple = (DEFAULT_DELTA,) * 3
    gamma: tuple = (0.5,) * N_ACTIONS
    cost_order: tuple = RECOMMENDABLE
    max_steps: int = 13

    def __post_init__(self):
        self.delta = tuple(float(d) for d in self.delta)
        self.gamma = tuple(float(g) for g in self.gamma)
        self.cost_order = tuple(parse_kind(k) for k in self.cost_order)
        if len(self.delta) != len(ENGINE_ORDER) or not all(0 < d <= 1 for d in self.delta):
            raise ValueError("delta needs one threshold in (0, 1] per output")
        if len(self.gamma) != N_ACTIONS or not all(0 < g < 1 for g in self.gamma):
            raise ValueError("gamma needs one threshold in (0, 1) per recommendable exam")
        if sorted(self.cost_order) != sorted(RECOMMENDABLE):
            raise ValueError("cost_order must be a permutation of the recommendable exams")


@dataclass
class StrategyTrace:
    requested: list = field(default_factory=list)  # (step, kind, granted)
    adjustments: int = 0
    final: DiagnosisLabel | None = None
    steps: int = 0
    guard_hit: bool = False
    probs: list = field(default_factory=list)  # engine-order prediction of every round

    @property
    def granted(self) -> frozenset:
        return frozenset(k for _, k, ok in self.requested if ok)

    def to_dict(self) -> dict:
        return {
            "requested": [[s, k.name, ok] for s, k, ok in self.requested],
            "adjustments": self.adjustments,
            "final": self.final.cls.value if self.final else None,
            "steps": self.steps,
            "guard_hit": self.guard_hit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyTrace":
        return cls(
            requested=[(int(s), parse_kind(k), bool(ok)) for s, k, ok in d["requested"]],
            adjustments=int(d["adjustments"]),
            final=DiagnosisLabel(Label(d["final"])) if d.get("final") else None,
            steps=int(d["steps"]),
            guard_hit=bool(d.get("guard_hit", False)),
        )


class DiagnosisModel(Protocol):
    def predict(self, rows: Mapping[ExamKind, FeatureRow]) -> tuple[np.ndarray, np.ndarray]:
        """Return (probabilities in engine order, 12 recommendation probabilities)."""


Source = Mapping[ExamKind, FeatureRow] | Callable[[ExamKind], FeatureRow | None]


def _provider(source: Source) -> Callable[[ExamKind], FeatureRow | None]:
    if callable(source) and not isinstance(source, Mapping):
        return source
    return lambda k: source.get(k)


def diagnose(
    source: Source,
    inst: InstitutionProfile,
    model: DiagnosisModel,
    cfg: EngineConfig | None = None,
    initial: Sequence[ExamKind] = (ExamKind.Base,),
) -> tuple[DiagnosisLabel, StrategyTrace]:
    """Run the dynamic diagnosis for one subject visit.

    A missing row in ``source`` is handled exactly like an exam the
    institution cannot perform.
    """
    cfg = cfg or EngineConfig()
    fetch = _provider(source)
    trace = StrategyTrace()
    rows: dict[ExamKind, FeatureRow] = {}
    tried: set[ExamKind] = set()
    for k in initial:
        row = fetch(k)
        if row is None:
            raise ValueError(f"source provides no {k.name} data")
        rows[k] = row
        tried.add(k)
        trace.requested.append((0, k, True))

    def available(k):
        return inst.can_execute(k) and fetch(k) is not None

    while True:
        if trace.steps >= cfg.max_steps:
            trace.guard_hit = True
            trace.final = DiagnosisLabel(Label.Unknown)
            return trace.final, trace
        trace.steps += 1
        step = trace.steps
        result, a_pred = model.predict(dict(rows))
        result = np.asarray(result, dtype=np.float64)
        trace.probs.append(result.tolist())
        for i, label in enumerate(ENGINE_ORDER):
            if result[i] >= cfg.delta[i]:
                trace.final = DiagnosisLabel(label)
                return trace.final, trace

        added = False
        for i, kind in enumerate(RECOMMENDABLE):
            if a_pred[i] < cfg.gamma[i] or kind in tried:
                continue
            tried.add(kind)
            if available(kind):
                rows[kind] = fetch(kind)
                trace.requested.append((step, kind, True))
                added = True
            else:
                trace.requested.append((step, kind, False))
                trace.adjustments += 1

        if not added:
            for kind in cfg.cost_order:
                if kind not in tried and available(kind):
                    tried.add(kind)
                    rows[kind] = fetch(kind)
                    trace.requested.append((step, kind, True))
                    added = True
                    break

        if not added:
            trace.final = DiagnosisLabel(Label.Unknown)
            return trace.final, trace


class AllExamsPolicy:
    """Wraps a model so every round recommends every exam (the all-exams baseline)."""

    def __init__(self, model: DiagnosisModel):
        self.model = model

    def predict(self, rows):
        result, _ = self.model.predict(rows)
        return result, np.ones(N_ACTIONS)


def write_traces(path, traces: Iterable[tuple[str, int, StrategyTrace]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, vi, t in traces:
            d = t.to_dict()
            d["subject_id"] = sid
            d["visit_index"] = vi
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def read_traces(path) -> list[tuple[str, int, StrategyTrace]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append((d["subject_id"], d["visit_index"], StrategyTrace.from_dict(d)))
    return out
