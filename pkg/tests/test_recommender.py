import numpy as np
import pytest

from openclinical import nn, recommender
from openclinical.domain import N_ACTIONS, RECOMMENDABLE, ExamKind, OARTuple, Observation
from openclinical.recommender import Batch, RecommenderConfig
from conftest import max_fd_rel_error

W = 4
PRED = np.array([0.5, 0.3, 0.2])


def tiny_cfg(**kw):
    base = dict(width=W, hidden=3, lstm_layers=2, predictor_widths=(4, 3), seed=1)
    base.update(kw)
    return RecommenderConfig(**base)


def random_batch(rng, n=6):
    seqs, preds = [], []
    for i in range(n):
        kinds = sorted({0} | set(rng.choice(np.arange(1, 13), size=i % 3 + 1, replace=False).tolist()))
        rows = {ExamKind(k): rng.standard_normal(W) for k in kinds}
        seqs.append(recommender.sequence_of(rows, W))
        preds.append(rng.dirichlet(np.ones(3)))
    targets = (rng.random((n, N_ACTIONS)) < 0.3).astype(float)
    return Batch(seqs, np.array(preds), targets, rng.uniform(0.1, 1.0, n))


def perturbed(cfg, rng, scale=0.3):
    p = recommender.init_params(cfg)
    for v in p.values():
        v += rng.normal(0, scale, v.shape)
    return p


@pytest.mark.parametrize("encoder", ["lstm", "meanpool"])
@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(encoder, seed):
    rng = np.random.default_rng(seed)
    cfg = tiny_cfg(encoder=encoder)
    p = perturbed(cfg, rng)
    batch = random_batch(rng)
    _, g = recommender.loss_and_grad(p, cfg, batch)
    err = max_fd_rel_error(lambda q: recommender.loss_parts(q, cfg, batch)[0], p, g)
    assert err < 1e-4


def test_zero_weights_give_one_half():
    cfg = tiny_cfg()
    p = {k: np.zeros_like(v) for k, v in recommender.init_params(cfg).items()}
    obs = Observation({ExamKind.Base: np.ones(W), ExamKind.Cog: np.ones(W)}, PRED)
    assert recommender.recommend(p, cfg, obs).tolist() == [0.5] * N_ACTIONS


def test_insertion_order_invariant():
    cfg = tiny_cfg()
    p = perturbed(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    rows = {k: rng.standard_normal(W) for k in (ExamKind.Base, ExamKind.MRI, ExamKind.Cog, ExamKind.CSF)}
    a = recommender.recommend(p, cfg, Observation(rows, PRED))
    b = recommender.recommend(p, cfg, Observation(dict(reversed(list(rows.items()))), PRED))
    assert a.tobytes() == b.tobytes()


def test_sequence_layout():
    seq = recommender.sequence_of({ExamKind.MRI: np.full(W, 2.0), ExamKind.Base: np.ones(W)}, W)
    assert seq.shape == (2, W + 13)
    assert seq[0, :W].tolist() == [1.0] * W and seq[0, W + 0] == 1.0
    assert seq[1, W + int(ExamKind.MRI)] == 1.0 and seq[:, W:].sum() == 2.0
    with pytest.raises(ValueError):
        recommender.sequence_of({ExamKind.Base: np.ones(W + 1)}, W)


def test_heads_are_independent():
    """Changing one head's target only moves that head's own output weights."""
    cfg = tiny_cfg()
    p = perturbed(cfg, np.random.default_rng(2))
    batch = random_batch(np.random.default_rng(3))
    _, g0 = recommender.loss_and_grad(p, cfg, batch)
    t = batch.targets.copy()
    t[:, 5] = 1.0 - t[:, 5]
    _, g1 = recommender.loss_and_grad(p, cfg, Batch(batch.seqs, batch.preds, t, batch.rewards))
    others = [j for j in range(N_ACTIONS) if j != 5]
    assert np.array_equal(g0["head.W"][:, others], g1["head.W"][:, others])
    assert np.array_equal(g0["head.b"][others], g1["head.b"][others])
    assert np.array_equal(g0["log_delta"][others], g1["log_delta"][others])
    assert not np.array_equal(g0["head.b"][5], g1["head.b"][5])


def test_log_delta_stationary_where_square_equals_bce():
    cfg = tiny_cfg()
    p = perturbed(cfg, np.random.default_rng(4))
    batch = random_batch(np.random.default_rng(5))
    _, bce = recommender.loss_parts(p, cfg, batch)
    p["log_delta"] = 0.5 * np.log(bce)
    _, g = recommender.loss_and_grad(p, cfg, batch)
    np.testing.assert_allclose(g["log_delta"], 0.0, atol=1e-12)
    base = recommender.loss_parts(p, cfg, batch)[0]
    for j in range(N_ACTIONS):
        for h in (-1e-3, 1e-3):
            q = {k: v.copy() for k, v in p.items()}
            q["log_delta"][j] += h
            assert recommender.loss_parts(q, cfg, batch)[0] > base


def test_perfect_predictions_leave_sum_of_log_delta():
    cfg = tiny_cfg()
    p = perturbed(cfg, np.random.default_rng(6))
    targets = np.tile((np.arange(N_ACTIONS) % 2).astype(float), (4, 1))
    p["head.W"][:] = 0.0
    p["head.b"] = np.where(targets[0] > 0, 60.0, -60.0)
    p["log_delta"] = np.linspace(-1, 1, N_ACTIONS)
    batch = random_batch(np.random.default_rng(7), n=4)
    batch = Batch(batch.seqs, batch.preds, targets, batch.rewards)
    total, _ = recommender.loss_parts(p, cfg, batch)
    assert total == pytest.approx(p["log_delta"].sum(), abs=1e-12)


def test_doubling_reward_doubles_its_bce():
    cfg = tiny_cfg()
    p = perturbed(cfg, np.random.default_rng(8))
    one = random_batch(np.random.default_rng(9), n=1)
    _, a = recommender.loss_parts(p, cfg, one)
    _, b = recommender.loss_parts(p, cfg, Batch(one.seqs, one.preds, one.targets, 2 * one.rewards))
    np.testing.assert_allclose(b, 2 * a, rtol=1e-14)


def test_batch_from_records():
    obs = Observation({ExamKind.Base: np.zeros(W)}, PRED)
    recs = [OARTuple(obs, {ExamKind.MRI, ExamKind.CSF}, 0.7)]
    b = recommender.batch_from_records(recs, W)
    assert b.targets[0, RECOMMENDABLE.index(ExamKind.MRI)] == 1.0
    assert b.targets.sum() == 2.0 and b.rewards.tolist() == [0.7]
    assert b.preds.shape == (1, 3) and b.seqs[0].shape == (1, W + 13)


def test_empty_inputs_rejected():
    cfg = tiny_cfg()
    empty = Batch([], np.zeros((0, 3)), np.zeros((0, N_ACTIONS)), np.zeros(0))
    with pytest.raises(ValueError):
        recommender.loss_and_grad(recommender.init_params(cfg), cfg, empty)
    with pytest.raises(ValueError):
        recommender.train_recommender(empty, cfg)
    with pytest.raises(ValueError):
        RecommenderConfig(width=W, encoder="gru")


def rule_records(rng, n):
    """CSF is the right action exactly when Cog has been observed; MRI always is."""
    recs = []
    for _ in range(n):
        kinds = [ExamKind.Base] + [k for k in (ExamKind.Cog, ExamKind.CE, ExamKind.FDG) if rng.random() < 0.5]
        rows = {k: rng.standard_normal(W) for k in kinds}
        action = {ExamKind.MRI} | ({ExamKind.CSF} if ExamKind.Cog in rows else set())
        recs.append(OARTuple(Observation(rows, rng.dirichlet(np.ones(3))), action, 1.0))
    return recs


def test_learns_constant_and_conditional_rules():
    rng = np.random.default_rng(10)
    cfg = tiny_cfg(hidden=6, predictor_widths=(16,), lr=1e-2, epochs=40, batch_size=32)
    train = recommender.batch_from_records(rule_records(rng, 300), W)
    test_recs = rule_records(rng, 200)
    res = recommender.train_recommender(train, cfg)
    mri, csf = RECOMMENDABLE.index(ExamKind.MRI), RECOMMENDABLE.index(ExamKind.CSF)
    probs = np.array([recommender.recommend(res.params, cfg, r.obs) for r in test_recs])
    assert probs[:, mri].min() > 0.9
    truth = np.array([ExamKind.Cog in r.obs.rows for r in test_recs])
    assert np.mean((probs[:, csf] > 0.5) == truth) >= 0.9


def test_training_deterministic():
    cfg = tiny_cfg(epochs=2, batch_size=4)
    batch = random_batch(np.random.default_rng(11), n=10)
    a = recommender.train_recommender(batch, cfg)
    b = recommender.train_recommender(batch, cfg)
    assert a.loss_curve == b.loss_curve
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_default_architecture_shapes():
    cfg = RecommenderConfig(width=W)
    p = recommender.init_params(cfg)
    assert sum(k.startswith("lstm.") and k.endswith(".Wx") for k in p) == 6
    assert sum(k.startswith("pred.") and k.endswith(".W") for k in p) == 13
    assert p["head.W"].shape == (32, N_ACTIONS) and p["log_delta"].shape == (N_ACTIONS,)
    assert p["lstm.0.f.b"][16:32].tolist() == [1.0] * 16
    assert nn.sigmoid(np.zeros(1)).tolist() == [0.5]
