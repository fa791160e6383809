"""Core data model: examinations, visits, labels, observations."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

DEFAULT_WIDTH = 2090


class ExamKind(enum.IntEnum):
    """The 13 examination categories; the integer value is the canonical (cheap -> expensive) order."""

    Base = 0
    Cog = 1
    CE = 2
    Neur = 3
    FB = 4
    PE = 5
    Blood = 6
    Urine = 7
    MRI = 8
    FDG = 9
    AV45 = 10
    Gene = 11
    CSF = 12

    @property
    def cost_rank(self) -> int:
        return int(self)

    @property
    def bit(self) -> int:
        return 1 << int(self)


CANONICAL_ORDER: tuple[ExamKind, ...] = tuple(ExamKind)
RECOMMENDABLE: tuple[ExamKind, ...] = CANONICAL_ORDER[1:]
N_KINDS = len(CANONICAL_ORDER)
N_ACTIONS = len(RECOMMENDABLE)


class Label(str, enum.Enum):
    AD = "AD"
    CN = "CN"
    Unknown = "Unknown"


KNOWN_LABELS: tuple[Label, ...] = (Label.AD, Label.CN)
N_KNOWN = len(KNOWN_LABELS)

# Probability vectors exist in two orders. OpenMax works with the unknown
# mass first, (Unknown, AD, CN); the engine scans thresholds with unknown
# last, (AD, CN, Unknown). OPENMAX_TO_ENGINE[i] is the openmax index that
# lands at engine index i.
OPENMAX_TO_ENGINE = np.array([1, 2, 0])
ENGINE_ORDER: tuple[Label, ...] = (Label.AD, Label.CN, Label.Unknown)


def to_engine_order(p_openmax: np.ndarray) -> np.ndarray:
    return np.asarray(p_openmax)[..., OPENMAX_TO_ENGINE]


def to_openmax_order(p_engine: np.ndarray) -> np.ndarray:
    return np.asarray(p_engine)[..., np.argsort(OPENMAX_TO_ENGINE)]


def kinds_to_mask(kinds: Iterable[ExamKind]) -> int:
    m = 0
    for k in kinds:
        m |= ExamKind(k).bit
    return m


def mask_to_kinds(mask: int) -> tuple[ExamKind, ...]:
    return tuple(k for k in CANONICAL_ORDER if mask & k.bit)


def parse_kind(name: str | ExamKind) -> ExamKind:
    if isinstance(name, ExamKind):
        return name
    try:
        return ExamKind[name]
    except KeyError:
        raise ValueError(f"unknown examination kind {name!r}") from None


@dataclass(frozen=True)
class DiagnosisLabel:
    cls: Label
    true_subtype: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "cls", Label(self.cls))
        if self.true_subtype is not None and self.cls is not Label.Unknown:
            raise ValueError("a subtype tag is only allowed on Unknown labels")

    @property
    def is_known(self) -> bool:
        return self.cls is not Label.Unknown


@dataclass(frozen=True)
class FeatureRow:
    kind: ExamKind
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "kind", parse_kind(self.kind))
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[0]


def _freeze_rows(rows) -> Mapping[ExamKind, FeatureRow]:
    if isinstance(rows, Mapping):
        items = rows.items()
    else:
        items = ((r.kind, r) for r in rows)
    out: dict[ExamKind, FeatureRow] = {}
    for kind, row in items:
        kind = parse_kind(kind)
        if not isinstance(row, FeatureRow):
            row = FeatureRow(kind, row)
        if row.kind is not kind:
            raise ValueError(f"row stored under {kind.name} has kind {row.kind.name}")
        if kind in out:
            raise ValueError(f"duplicate examination kind {kind.name}")
        out[kind] = row
    return MappingProxyType({k: out[k] for k in sorted(out)})


@dataclass(frozen=True)
class VisitRecord:
    subject_id: str
    visit_index: int
    label: DiagnosisLabel
    rows: Mapping[ExamKind, FeatureRow]

    def __post_init__(self):
        object.__setattr__(self, "rows", _freeze_rows(self.rows))

    def __reduce__(self):
        return (VisitRecord, (self.subject_id, self.visit_index, self.label, dict(self.rows)))

    @property
    def kinds(self) -> tuple[ExamKind, ...]:
        return tuple(self.rows)

    @property
    def mask(self) -> int:
        return kinds_to_mask(self.rows)

    def subset(self, kinds: Iterable[ExamKind]) -> dict[ExamKind, FeatureRow]:
        return {k: self.rows[k] for k in sorted(set(kinds))}


@dataclass(frozen=True)
class StrategySet:
    """Examination subsets of one visit, ascending by cardinality."""

    strategies: tuple[frozenset[ExamKind], ...]

    def __post_init__(self):
        strategies = tuple(frozenset(s) for s in self.strategies)
        if len(set(strategies)) != len(strategies):
            raise ValueError("duplicate strategy")
        for s in strategies:
            if ExamKind.Base not in s:
                raise ValueError("every strategy must contain Base")
        sizes = [len(s) for s in strategies]
        if sizes != sorted(sizes):
            raise ValueError("strategies must be sorted by cardinality")
        object.__setattr__(self, "strategies", strategies)

    def __len__(self):
        return len(self.strategies)

    def __iter__(self):
        return iter(self.strategies)

    def __getitem__(self, i):
        return self.strategies[i]

    @property
    def masks(self) -> np.ndarray:
        return np.array([kinds_to_mask(s) for s in self.strategies], dtype=np.int64)


@dataclass(frozen=True)
class Observation:
    rows: Mapping[ExamKind, FeatureRow]
    pred: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rows", _freeze_rows(self.rows))
        p = np.array(self.pred, dtype=np.float64).reshape(-1)
        if p.shape[0] != N_KNOWN + 1:
            raise ValueError(f"pred must have {N_KNOWN + 1} entries, got {p.shape[0]}")
        if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("pred is not a probability vector")
        p.setflags(write=False)
        object.__setattr__(self, "pred", p)

    @property
    def kinds(self) -> tuple[ExamKind, ...]:
        return tuple(self.rows)


@dataclass(frozen=True)
class OARTuple:
    obs: Observation
    action: frozenset[ExamKind]
    reward: float

    def __post_init__(self):
        action = frozenset(parse_kind(k) for k in self.action)
        if not action:
            raise ValueError("action must be nonempty")
        if ExamKind.Base in action:
            raise ValueError("Base is never an action")
        if action & set(self.obs.rows):
            raise ValueError("action overlaps the observed examinations")
        if not self.reward > 0:
            raise ValueError("reward must be strictly positive")
        object.__setattr__(self, "action", action)
        object.__setattr__(self, "reward", float(self.reward))

    @property
    def action_vector(self) -> np.ndarray:
        y = np.zeros(N_ACTIONS)
        for k in self.action:
            y[int(k) - 1] = 1.0
        return y


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def validate_visit(v: VisitRecord, width: int) -> list[str]:
    """Return every invariant violation of ``v``; an empty list means the visit is valid."""
    problems = []
    if ExamKind.Base not in v.rows:
        problems.append("Base absent")
    for kind, row in v.rows.items():
        if row.width != width:
            problems.append(f"{kind.name}: width {row.width} != {width}")
        if not np.all(np.isfinite(row.values)):
            problems.append(f"{kind.name}: non-finite value")
    if v.visit_index < 0:
        problems.append("negative visit_index")
    return problems


def flatten(
    rows: Mapping[ExamKind, FeatureRow] | Observation,
    order: Iterable[ExamKind] = CANONICAL_ORDER,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack the present rows in ``order``.

    Returns the ``n x W`` matrix of present rows and a presence mask over
    ``order``. Raises ``ValueError`` on mixed widths or a missing Base row.
    """
    rows = rows.rows if isinstance(rows, Observation) else _freeze_rows(rows)
    order = tuple(order)
    if ExamKind.Base not in rows:
        raise ValueError("cannot flatten without a Base row")
    widths = {r.width for r in rows.values()}
    if len(widths) != 1:
        raise ValueError(f"width mismatch across rows: {sorted(widths)}")
    present = [k for k in order if k in rows]
    mat = np.stack([rows[k].values for k in present])
    mask = np.array([1.0 if k in rows else 0.0 for k in order])
    return mat, mask


def dense_input(rows: Mapping[ExamKind, FeatureRow] | Observation, width: int) -> np.ndarray:
    """Fixed-length network input: all 13 slots (zeros when absent) followed by the presence mask."""
    rows = rows.rows if isinstance(rows, Observation) else _freeze_rows(rows)
    x = np.zeros(N_KINDS * width + N_KINDS)
    for k, r in rows.items():
        if r.width != width:
            raise ValueError(f"{k.name}: width {r.width} != {width}")
        x[int(k) * width : (int(k) + 1) * width] = r.values
        x[N_KINDS * width + int(k)] = 1.0
    return x


# --------------------------------------------------------------------------
# JSON Lines cohort format
# --------------------------------------------------------------------------


def visit_to_dict(v: VisitRecord) -> dict:
    return {
        "subject_id": v.subject_id,
        "visit_index": v.visit_index,
        "label": v.label.cls.value,
        "subtype": v.label.true_subtype,
        "rows": {k.name: [float(x) for x in r.values] for k, r in v.rows.items()},
    }


def visit_from_dict(d: dict) -> VisitRecord:
    return VisitRecord(
        subject_id=str(d["subject_id"]),
        visit_index=int(d["visit_index"]),
        label=DiagnosisLabel(Label(d["label"]), d.get("subtype")),
        rows={parse_kind(k): np.asarray(v, dtype=np.float64) for k, v in d["rows"].items()},
    )


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def write_cohort(path, visits: Iterable[VisitRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_jsonl(visit_to_dict(v) for v in visits))


def read_cohort(path) -> list[VisitRecord]:
    with open(path, encoding="utf-8") as fh:
        return [visit_from_dict(json.loads(line)) for line in fh if line.strip()]
