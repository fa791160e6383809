"""Synthetic cohorts and institution profiles.

Every exam row is Gaussian around a class mean. Class means for exam ``k``
are placed along a random unit direction ``u_k`` around an exam-specific
offset ``b_k``::

    AD  = b_k + s_k / 2 * u_k
    CN  = b_k - s_k / 2 * u_k
    MCI = b_k + f_MCI * s_k / 2 * u_k      (|f| < 1: between AD and CN)
    SMC = b_k + f_SMC * s_k / 2 * u_k

with the separation ``s_k`` growing along the cost order, so cheap exams
separate weakly and expensive ones strongly. MCI and SMC subjects are
labelled Unknown and keep their subtype tag.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .domain import (
    CANONICAL_ORDER,
    DiagnosisLabel,
    ExamKind,
    Label,
    VisitRecord,
)
from .engine import InstitutionProfile

CLASSES = ("AD", "CN", "MCI", "SMC")
UNKNOWN_SUBTYPES = ("MCI", "SMC")
# Unknown subtypes are drawn tighter around their between-class means; at
# unit variance a midpoint subject is often as far along the AD/CN axis as a
# known one and no open-set score can tell them apart on partial data.
UNKNOWN_VARIANCE = 0.25

DEFAULT_MISSINGNESS = {
    "Base": 0.0,
    "Cog": 0.05,
    "CE": 0.1,
    "Neur": 0.15,
    "FB": 0.15,
    "PE": 0.2,
    "Blood": 0.3,
    "Urine": 0.35,
    "MRI": 0.3,
    "FDG": 0.5,
    "AV45": 0.55,
    "Gene": 0.5,
    "CSF": 0.6,
}


@dataclass
class CohortSpec:
    seed: int = 7
    n_subjects: int = 2000
    width: int = 16
    class_priors: dict = field(default_factory=lambda: {"AD": 0.3, "CN": 0.3, "MCI": 0.25, "SMC": 0.15})
    separation: tuple = (0.8, 3.6)  # s_k for Base and for CSF, linear in cost rank between
    unknown_position: dict = field(default_factory=lambda: {"MCI": 0.15, "SMC": -0.15})
    offset_scale: float = 1.0
    # class -> exam -> variance; unlisted entries are 1.0
    variances: dict = field(default_factory=lambda: {c: {k.name: UNKNOWN_VARIANCE for k in ExamKind} for c in UNKNOWN_SUBTYPES})
    missingness: dict = field(default_factory=lambda: dict(DEFAULT_MISSINGNESS))
    visits_per_subject: tuple = (0.5, 0.3, 0.2)  # P(1 visit), P(2 visits), ...
    means: dict | None = None  # class -> exam -> list of W floats; derived when None

    def __post_init__(self):
        self.separation = tuple(float(s) for s in self.separation)
        self.visits_per_subject = tuple(float(p) for p in self.visits_per_subject)
        self.missingness = {**{k.name: 0.0 for k in ExamKind}, **self.missingness}

    def validate(self) -> list[str]:
        problems = []
        if set(self.class_priors) - set(CLASSES):
            problems.append(f"unknown classes in priors: {sorted(set(self.class_priors) - set(CLASSES))}")
        if any(p < 0 for p in self.class_priors.values()) or abs(sum(self.class_priors.values()) - 1.0) > 1e-9:
            problems.append("class priors must be non-negative and sum to 1")
        for c, per in self.variances.items():
            for e, var in per.items():
                if not var > 0:
                    problems.append(f"variance {c}/{e} must be positive")
        for e, m in self.missingness.items():
            if not 0.0 <= m < 1.0:
                problems.append(f"missingness {e} must lie in [0, 1)")
        if self.missingness.get("Base", 0.0) != 0.0:
            problems.append("Base missingness must be 0")
        if abs(sum(self.visits_per_subject) - 1.0) > 1e-9 or any(p < 0 for p in self.visits_per_subject):
            problems.append("visits_per_subject must be a probability vector")
        if self.n_subjects < 0 or self.width < 1:
            problems.append("n_subjects must be >= 0 and width >= 1")
        return problems

    def class_means(self) -> dict:
        """Mean vector per (class, exam name), explicit or derived from the geometry fields."""
        if self.means is not None:
            return {c: {e: np.asarray(v, dtype=np.float64) for e, v in per.items()} for c, per in self.means.items()}
        rng = np.random.default_rng([self.seed, 1])
        lo, hi = self.separation
        out = {c: {} for c in CLASSES}
        for k in CANONICAL_ORDER:
            s = lo + (hi - lo) * k.cost_rank / (len(CANONICAL_ORDER) - 1)
            u = rng.standard_normal(self.width)
            u /= np.linalg.norm(u)
            b = self.offset_scale * rng.standard_normal(self.width)
            pos = {"AD": 1.0, "CN": -1.0, **self.unknown_position}
            for c in CLASSES:
                out[c][k.name] = b + pos[c] * (s / 2.0) * u
        return out

    def variance(self, cls: str, exam: str) -> float:
        return float(self.variances.get(cls, {}).get(exam, 1.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["separation"] = list(self.separation)
        d["visits_per_subject"] = list(self.visits_per_subject)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown CohortSpec fields: {sorted(extra)}")
        return cls(**d)


def load_spec(path) -> CohortSpec:
    with open(path, encoding="utf-8") as fh:
        return CohortSpec.from_dict(json.load(fh))


def save_spec(path, spec: CohortSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def _label(cls: str) -> DiagnosisLabel:
    if cls in UNKNOWN_SUBTYPES:
        return DiagnosisLabel(Label.Unknown, cls)
    return DiagnosisLabel(Label(cls))


def generate_cohort(spec: CohortSpec) -> list[VisitRecord]:
    """Draw ``spec.n_subjects`` subjects with their visits; deterministic in ``spec.seed``."""
    problems = spec.validate()
    if problems:
        raise ValueError("invalid CohortSpec: " + "; ".join(problems))
    means = spec.class_means()
    rng = np.random.default_rng([spec.seed, 2])
    classes = [c for c in CLASSES if spec.class_priors.get(c, 0.0) > 0]
    priors = np.array([spec.class_priors[c] for c in classes])
    priors = priors / priors.sum()
    n_visits_p = np.asarray(spec.visits_per_subject)
    digits = max(4, len(str(spec.n_subjects)))
    visits = []
    for i in range(spec.n_subjects):
        cls = classes[rng.choice(len(classes), p=priors)]
        nv = 1 + int(rng.choice(n_visits_p.shape[0], p=n_visits_p))
        sid = f"S{i:0{digits}d}"
        for vi in range(nv):
            rows = {}
            for k in CANONICAL_ORDER:
                miss = rng.random()
                noise = rng.standard_normal(spec.width)
                if k is not ExamKind.Base and miss < spec.missingness[k.name]:
                    continue
                rows[k] = means[cls][k.name] + np.sqrt(spec.variance(cls, k.name)) * noise
            visits.append(VisitRecord(sid, vi, _label(cls), rows))
    return visits


def split(
    cohort: Sequence[VisitRecord],
    fractions=(0.7, 0.05, 0.25),
    seed: int = 0,
) -> tuple[list[VisitRecord], list[VisitRecord], list[VisitRecord]]:
    """Subject-level train/val/test split.

    ``fractions`` apply to the known-class subjects; every Unknown subject
    goes to the test split.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ValueError("fractions must be three values summing to 1")
    known, unknown = [], []
    seen = set()
    for v in cohort:
        if v.subject_id in seen:
            continue
        seen.add(v.subject_id)
        (known if v.label.is_known else unknown).append(v.subject_id)
    known.sort()
    rng = np.random.default_rng(seed)
    order = [known[i] for i in rng.permutation(len(known))]
    n_train = int(round(fractions[0] * len(order)))
    n_val = int(round(fractions[1] * len(order)))
    train_ids = set(order[:n_train])
    val_ids = set(order[n_train : n_train + n_val])
    train, val, test = [], [], []
    for v in cohort:
        if v.subject_id in train_ids:
            train.append(v)
        elif v.subject_id in val_ids:
            val.append(v)
        else:
            test.append(v)
    return train, val, test


def generate_institutions(seed: int, n: int, refusal_rate: float) -> list[InstitutionProfile]:
    """``n`` profiles; each non-Base exam is independently unavailable with ``refusal_rate``."""
    if not 0.0 <= refusal_rate < 1.0:
        raise ValueError("refusal_rate must lie in [0, 1)")
    rng = np.random.default_rng([seed, 3])
    out = []
    for i in range(n):
        drop = rng.random(len(CANONICAL_ORDER) - 1) < refusal_rate
        ex = [ExamKind.Base] + [k for k, d in zip(CANONICAL_ORDER[1:], drop) if not d]
        out.append(InstitutionProfile(frozenset(ex), f"I{i:02d}"))
    return out
