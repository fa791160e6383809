"""Strategy enumeration and reward generation for the examination dataset."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .domain import (
    KNOWN_LABELS,
    N_KNOWN,
    ExamKind,
    Label,
    OARTuple,
    Observation,
    StrategySet,
    VisitRecord,
    dumps_jsonl,
    parse_kind,
)

DEFAULT_CAP = 4096


@dataclass(frozen=True)
class RewardRecord:
    tuple: OARTuple
    source_pair: tuple  # (q, v) positions in the strategy set
    subject_id: str = ""
    visit_index: int = 0

    @property
    def reward(self) -> float:
        return self.tuple.reward

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "visit_index": self.visit_index,
            "obs_kinds": [k.name for k in self.tuple.obs.kinds],
            "pred": [float(x) for x in self.tuple.obs.pred],
            "action_kinds": [k.name for k in sorted(self.tuple.action)],
            "reward": self.tuple.reward,
            "pair": list(self.source_pair),
        }


def enumerate_strategies(v: VisitRecord, cap: int = DEFAULT_CAP) -> StrategySet:
    """Base-anchored subsets of the visit's exams, by cardinality then canonical order, at most ``cap``."""
    others = [k for k in v.kinds if k is not ExamKind.Base]
    out = []
    if ExamKind.Base in v.rows and cap > 0:
        for r in range(len(others) + 1):
            for combo in itertools.combinations(others, r):
                out.append(frozenset((ExamKind.Base, *combo)))
                if len(out) >= cap:
                    return StrategySet(tuple(out))
    return StrategySet(tuple(out))


def known_part(pred) -> np.ndarray:
    """Known-class entries of an engine-order vector (AD, CN, Unknown), renormalised.

    An all-unknown vector maps to the uniform distribution over known classes.
    """
    p = np.asarray(pred, dtype=np.float64)[..., :N_KNOWN]
    s = p.sum(axis=-1, keepdims=True)
    return np.divide(p, s, out=np.full_like(p, 1.0 / N_KNOWN), where=s > 0)


def one_hot(label: Label) -> np.ndarray:
    y = np.zeros(N_KNOWN)
    y[KNOWN_LABELS.index(Label(label))] = 1.0
    return y


def compute_rewards(
    ds: StrategySet,
    preds: Mapping[frozenset, np.ndarray],
    y_true,
    visit: VisitRecord,
) -> list[RewardRecord]:
    """Reward every strict-superset move ``ds_q -> ds_v`` and keep the positive ones.

    ``r = sum(y*p_v - y*p_q) + sum(~y*p_q - ~y*p_v)`` on the renormalised
    known-class predictions. The observation of a record is the data of
    ``ds_q`` with its full prediction; the action is ``ds_v - ds_q``.
    Records come out in (q, v) row-major order.
    """
    missing = [s for s in ds if s not in preds]
    if missing:
        raise KeyError(f"no prediction for strategy {sorted(k.name for k in missing[0])}")
    y = np.asarray(y_true, dtype=np.float64)
    full = np.array([np.asarray(preds[s], dtype=np.float64) for s in ds]).reshape(len(ds), -1)
    if len(ds) < 2:
        return []
    q_idx, v_idx, r = _kernels.reward_pairs(ds.masks, np.ascontiguousarray(known_part(full)), y)
    out = []
    for q, v_, rr in zip(q_idx.tolist(), v_idx.tolist(), r.tolist()):
        obs = Observation(visit.subset(ds[q]), full[q])
        act = ds[v_] - ds[q]
        out.append(RewardRecord(OARTuple(obs, act, rr), (q, v_), visit.subject_id, visit.visit_index))
    return out


def build_examination_dataset(
    visits: Sequence[VisitRecord],
    predict: Callable[[VisitRecord, StrategySet], np.ndarray],
    cap: int = DEFAULT_CAP,
) -> list[RewardRecord]:
    """Concatenate reward records over known-class visits, ordered by (subject_id, visit_index).

    ``predict(visit, strategies)`` returns an engine-order probability row per
    strategy (normally the backbone + OpenMax pipeline).
    """
    out: list[RewardRecord] = []
    for v in sorted(visits, key=lambda v: (v.subject_id, v.visit_index)):
        if not v.label.is_known:
            continue
        ds = enumerate_strategies(v, cap)
        if len(ds) < 2:
            continue
        P = np.asarray(predict(v, ds))
        preds = {s: P[i] for i, s in enumerate(ds)}
        out.extend(compute_rewards(ds, preds, one_hot(v.label.cls), v))
    return out


def write_examination_dataset(path, records: Iterable[RewardRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_jsonl(r.to_dict() for r in records))


def read_examination_dataset(path, visits: Sequence[VisitRecord]) -> list[RewardRecord]:
    """Rebuild records from the JSON Lines file, taking row data from ``visits``."""
    by_key = {(v.subject_id, v.visit_index): v for v in visits}
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            v = by_key[(d["subject_id"], d["visit_index"])]
            obs = Observation(v.subset(parse_kind(k) for k in d["obs_kinds"]), d["pred"])
            act = frozenset(parse_kind(k) for k in d["action_kinds"])
            out.append(
                RewardRecord(OARTuple(obs, act, d["reward"]), tuple(d.get("pair", (0, 0))), v.subject_id, v.visit_index)
            )
    return out
