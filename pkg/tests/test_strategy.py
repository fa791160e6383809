import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from openclinical import strategy
from openclinical.domain import CANONICAL_ORDER, ExamKind, StrategySet
from conftest import make_visit

B, COG, CE, MRI = ExamKind.Base, ExamKind.Cog, ExamKind.CE, ExamKind.MRI


def brute_force_rewards(ds, preds, y):
    """Naive double loop over strategy pairs, written independently of the kernel."""
    out = []
    for q in range(len(ds)):
        for v in range(len(ds)):
            if not q < v or not ds[q] < ds[v]:
                continue
            pq = np.asarray(preds[ds[q]], dtype=float)[:2]
            pv = np.asarray(preds[ds[v]], dtype=float)[:2]
            pq = pq / pq.sum() if pq.sum() > 0 else np.full(2, 0.5)
            pv = pv / pv.sum() if pv.sum() > 0 else np.full(2, 0.5)
            r = 0.0
            for j in range(2):
                r += y[j] * pv[j] - y[j] * pq[j]
            for j in range(2):
                r += (1 - y[j]) * pq[j] - (1 - y[j]) * pv[j]
            if r > 0:
                out.append((q, v, r, ds[v] - ds[q]))
    return out


def random_preds(ds, rng):
    return {s: rng.dirichlet(np.ones(3)) for s in ds}


def test_enumerate_examples():
    assert list(strategy.enumerate_strategies(make_visit(["Base", "Cog"]))) == [{B}, {B, COG}]
    v = make_visit(["Base", "Cog", "CE", "MRI"])
    ds = strategy.enumerate_strategies(v)
    assert len(ds) == 8
    assert list(strategy.enumerate_strategies(v, cap=4)) == [{B}, {B, COG}, {B, CE}, {B, MRI}]


def test_enumerate_full_visit():
    v = make_visit([k.name for k in CANONICAL_ORDER])
    assert len(strategy.enumerate_strategies(v)) == 4096
    assert len(strategy.enumerate_strategies(v, cap=100)) == 100


def test_reward_examples():
    v = make_visit(["Base", "Cog"])
    ds = strategy.enumerate_strategies(v)
    y = np.array([1.0, 0.0])
    recs = strategy.compute_rewards(ds, {ds[0]: [0.6, 0.4, 0.0], ds[1]: [0.8, 0.2, 0.0]}, y, v)
    assert len(recs) == 1
    assert recs[0].reward == pytest.approx(0.4, abs=1e-15)
    assert recs[0].tuple.action == {COG}
    assert recs[0].tuple.obs.kinds == (B,)
    assert strategy.compute_rewards(ds, {ds[0]: [0.6, 0.4, 0.0], ds[1]: [0.6, 0.4, 0.0]}, y, v) == []
    assert strategy.compute_rewards(ds, {ds[0]: [0.8, 0.2, 0.0], ds[1]: [0.6, 0.4, 0.0]}, y, v) == []


def test_missing_prediction():
    v = make_visit(["Base", "Cog"])
    ds = strategy.enumerate_strategies(v)
    with pytest.raises(KeyError):
        strategy.compute_rewards(ds, {ds[0]: [1.0, 0.0, 0.0]}, [1.0, 0.0], v)


def test_renormalized_known_part():
    np.testing.assert_allclose(strategy.known_part([0.3, 0.1, 0.6]), [0.75, 0.25])
    np.testing.assert_allclose(strategy.known_part([0.0, 0.0, 1.0]), [0.5, 0.5])


def test_matches_brute_force_on_500_visits():
    rng = np.random.default_rng(2024)
    kinds = list(CANONICAL_ORDER[1:])
    for i in range(500):
        m = int(rng.integers(0, 7))  # up to 2^6 = 64 strategies
        chosen = ["Base"] + [kinds[j].name for j in rng.choice(len(kinds), size=m, replace=False)]
        v = make_visit(chosen, seed=i)
        ds = strategy.enumerate_strategies(v)
        assert len(ds) <= 64
        preds = random_preds(ds, rng)
        y = strategy.one_hot(["AD", "CN"][i % 2])
        got = strategy.compute_rewards(ds, preds, y, v)
        want = brute_force_rewards(ds, preds, y)
        assert [(r.source_pair[0], r.source_pair[1], r.tuple.action) for r in got] == [(q, v_, a) for q, v_, _, a in want]
        for r, (_, _, rr, _) in zip(got, want):
            assert abs(r.reward - rr) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**12 - 1), st.integers(0, 10_000))
def test_record_invariants(mask, seed):
    kinds = ["Base"] + [k.name for k in CANONICAL_ORDER[1:] if mask & (1 << (int(k) - 1))][:5]
    v = make_visit(kinds, seed=seed)
    ds = strategy.enumerate_strategies(v)
    preds = random_preds(ds, np.random.default_rng(seed))
    for r in strategy.compute_rewards(ds, preds, [0.0, 1.0], v):
        q, vv = r.source_pair
        assert ds[q] < ds[vv]
        assert r.tuple.action and not (r.tuple.action & set(r.tuple.obs.kinds))
        assert 0 < r.reward <= 2.0


def test_build_dataset_counts():
    visits = [make_visit(["Base", "Cog", "MRI"], seed=i, subject=f"S{i}") for i in range(4)]
    visits.append(make_visit(["Base", "Cog"], subject="U", label="Unknown", subtype="MCI"))
    const = strategy.build_examination_dataset(visits, lambda v, ds: np.tile([0.5, 0.5, 0.0], (len(ds), 1)))
    assert const == []
    rng = np.random.default_rng(0)
    table = {}

    def predict(v, ds):
        P = np.array([rng.dirichlet(np.ones(3)) for _ in ds])
        table[v.subject_id] = (ds, P)
        return P

    recs = strategy.build_examination_dataset(visits, predict)
    expected = 0
    for sid, (ds, P) in table.items():
        expected += len(brute_force_rewards(ds, {s: P[i] for i, s in enumerate(ds)}, [1.0, 0.0]))
    assert len(recs) == expected
    assert "U" not in table
    keys = [(r.subject_id, r.visit_index) for r in recs]
    assert keys == sorted(keys)


def test_single_pair_one_record():
    v = make_visit(["Base", "CE"])
    recs = strategy.build_examination_dataset([v], lambda v, ds: np.array([[0.4, 0.6, 0.0], [0.9, 0.1, 0.0]]))
    assert len(recs) == 1


def test_jsonl_roundtrip(tmp_path):
    v = make_visit(["Base", "Cog", "MRI"])
    ds = strategy.enumerate_strategies(v)
    preds = {s: p for s, p in zip(ds, np.linspace([0.1, 0.9, 0.0], [0.9, 0.1, 0.0], len(ds)))}
    recs = strategy.compute_rewards(ds, preds, [1.0, 0.0], v)
    assert recs
    p = tmp_path / "dx.jsonl"
    strategy.write_examination_dataset(p, recs)
    line = json.loads(p.read_text().splitlines()[0])
    assert {"obs_kinds", "pred", "action_kinds", "reward"} <= set(line)
    back = strategy.read_examination_dataset(p, [v])
    assert [r.to_dict() for r in back] == [r.to_dict() for r in recs]


def test_strategy_set_accepts_enumeration():
    v = make_visit(["Base", "Cog", "CE"])
    ds = strategy.enumerate_strategies(v)
    assert isinstance(ds, StrategySet)
    assert all(B in s for s in ds)
