import numpy as np
import pytest

from openclinical import backbone, nn
from openclinical.backbone import BackboneConfig
from openclinical.domain import ExamKind, StrategySet
from conftest import make_visit, max_fd_rel_error


def small_cfg(rng, **kw):
    d = int(rng.integers(3, 9))
    enc = tuple(int(x) for x in rng.integers(2, 6, size=int(rng.integers(1, 3))))
    cls = tuple(int(x) for x in rng.integers(2, 5, size=int(rng.integers(1, 3))))
    base = dict(input_dim=d, encoder_widths=enc, classifier_widths=cls, beta=0.01, mu=0.7, seed=int(rng.integers(1000)))
    base.update(kw)
    return BackboneConfig(**base)


def fd_check(cfg, seed, n=5):
    rng = np.random.default_rng(seed)
    p = backbone.init_params(cfg)
    for v in p.values():
        v += rng.normal(0, 0.3, v.shape)
    X = rng.standard_normal((n, cfg.input_dim))
    y = rng.integers(0, cfg.n_classes, n)
    _, g = backbone.loss_and_grad(p, cfg, X, y)
    return max_fd_rel_error(lambda q: backbone.loss_terms(q, cfg, X, y)["total"], p, g)


def test_gradient_two_layer_eight_features():
    cfg = BackboneConfig(input_dim=8, encoder_widths=(6, 4), classifier_widths=(5, 3), beta=0.01, mu=0.5)
    assert fd_check(cfg, 0) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_gradient_random_configs(seed):
    rng = np.random.default_rng(100 + seed)
    cfg = small_cfg(rng, concat_decoder=bool(seed % 3), activation="tanh" if seed % 4 else "linear")
    assert fd_check(cfg, seed) < 1e-4


def test_zero_weights_uniform():
    cfg = BackboneConfig(input_dim=5, encoder_widths=(4, 3), classifier_widths=(3,))
    p = {k: np.zeros_like(v) for k, v in backbone.init_params(cfg).items()}
    out = backbone.forward(p, cfg, np.ones(5))
    assert out.activation.tolist() == [0.0, 0.0]
    assert nn.softmax(out.activation).tolist() == [0.5, 0.5]
    assert backbone.loss_terms(p, cfg, np.ones((1, 5)), [0])["l2"] == 0.0


def test_identity_autoencoder_reconstructs():
    d = 6
    cfg = BackboneConfig(input_dim=d, encoder_widths=(d,), classifier_widths=(3,), activation="linear")
    p = backbone.init_params(cfg)
    p["enc.0.W"] = np.eye(d)
    p["dec.0.W"] = np.eye(d)
    X = np.random.default_rng(0).standard_normal((4, d))
    out = backbone.forward(p, cfg, X)
    np.testing.assert_array_equal(out.reconstruction, X)
    assert backbone.loss_terms(p, cfg, X, [0, 1, 0, 1])["l4"] == 0.0


def straight_line_forward(p, x):
    """Independent forward of the (6 -> 4 -> 3) encoder / (5, 2, 2) classifier net with decoder concat."""
    t = np.tanh
    h1 = t(x @ p["enc.0.W"] + p["enc.0.b"])
    z = t(h1 @ p["enc.1.W"] + p["enc.1.b"])
    d1 = t(z @ p["dec.0.W"] + p["dec.0.b"])
    xr = d1 @ p["dec.1.W"] + p["dec.1.b"]
    c1 = t(np.concatenate([z, d1]) @ p["cls.0.W"] + p["cls.0.b"])
    c2 = t(c1 @ p["cls.1.W"] + p["cls.1.b"])
    act = c2 @ p["cls.2.W"] + p["cls.2.b"]
    return act, c2, xr


def test_forward_matches_straight_line():
    cfg = BackboneConfig(input_dim=6, encoder_widths=(4, 3), classifier_widths=(5, 2), seed=3)
    p = backbone.init_params(cfg)
    rng = np.random.default_rng(1)
    for v in p.values():
        v += rng.normal(0, 0.2, v.shape)
    for _ in range(5):
        x = rng.standard_normal(6)
        out = backbone.forward(p, cfg, x)
        act, emb, xr = straight_line_forward(p, x)
        np.testing.assert_allclose(out.activation, act, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(out.embedding, emb, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(out.reconstruction, xr, rtol=1e-12, atol=1e-14)


def test_cross_entropy_at_truth_is_zero():
    assert backbone.cross_entropy(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) == 0.0


def test_shape_mismatch():
    cfg = BackboneConfig(input_dim=4)
    with pytest.raises(ValueError):
        backbone.forward(backbone.init_params(cfg), cfg, np.zeros(5))


def perceptron_separates(X, y, epochs=1000):
    """Oracle: the classic perceptron converges iff the data is linearly separable."""
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    s = 2 * y - 1
    w = np.zeros(Xb.shape[1])
    for _ in range(epochs):
        wrong = np.flatnonzero(s * (Xb @ w) <= 0)
        if wrong.size == 0:
            return True
        w += s[wrong[0]] * Xb[wrong[0]]
    return False


@pytest.mark.slow
def test_separable_training_accuracy():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((300, 6))
    w = rng.standard_normal(6)
    m = X @ w
    keep = np.abs(m) > 0.3
    X, y = X[keep], (m[keep] > 0).astype(int)
    assert perceptron_separates(X, y)
    cfg = BackboneConfig(input_dim=6, encoder_widths=(8, 4), classifier_widths=(4,), lr=1e-2, batch_size=32, epochs=200, seed=0)
    res = backbone.train_backbone(X, y, cfg)
    acc = np.mean(np.argmax(backbone.predict_proba(res.params, cfg, X), axis=1) == y)
    assert acc >= 0.99


def test_single_sample_loss_decreases():
    cfg = BackboneConfig(input_dim=5, encoder_widths=(4, 3), classifier_widths=(3,), lr=1e-2)
    X = np.random.default_rng(0).standard_normal((1, 5))
    res = backbone.train_backbone(X, [1], cfg, steps=11)
    assert all(b < a for a, b in zip(res.loss_curve, res.loss_curve[1:]))


def test_determinism():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((50, 5))
    y = rng.integers(0, 2, 50)
    cfg = BackboneConfig(input_dim=5, encoder_widths=(4, 3), classifier_widths=(3,), epochs=3, batch_size=16, seed=11)
    a = backbone.train_backbone(X, y, cfg).params
    b = backbone.train_backbone(X.copy(), y.copy(), cfg).params
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_mu_beta_zero_is_pure_cross_entropy():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((20, 5))
    y = rng.integers(0, 2, 20)
    cfg = BackboneConfig(input_dim=5, encoder_widths=(4, 3), classifier_widths=(3,), mu=0.0, beta=0.0, lr=1e-2)
    res = backbone.train_backbone(X, y, cfg, steps=5)
    p = backbone.init_params(cfg)
    opt = nn.Adam(p, lr=cfg.lr)
    for step_loss in res.loss_curve:
        terms = backbone.loss_terms(p, cfg, X, y)
        assert step_loss == terms["l1"] == terms["total"]
        _, g = backbone.loss_and_grad(p, cfg, X, y)
        # the reconstruction layer only feeds the reconstruction term
        assert np.all(g["dec.1.W"] == 0) and np.all(g["dec.1.b"] == 0)
        opt.step(p, g)


def test_softmax_sums_to_one():
    cfg = BackboneConfig(input_dim=7, encoder_widths=(5, 3), classifier_widths=(4, 2))
    P = backbone.predict_proba(backbone.init_params(cfg), cfg, np.random.default_rng(0).standard_normal((100, 7)) * 10)
    assert np.all(np.abs(P.sum(axis=1) - 1.0) <= 1e-9)


def test_rejects_empty_and_unknown_labels():
    cfg = BackboneConfig(input_dim=3, encoder_widths=(2,), classifier_widths=(2,))
    with pytest.raises(ValueError):
        backbone.train_backbone(np.zeros((0, 3)), [], cfg)
    with pytest.raises(ValueError):
        backbone.train_backbone(np.zeros((2, 3)), [0, 2], cfg)


def test_early_stopping_records_validation():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((40, 4))
    y = (X[:, 0] > 0).astype(int)
    cfg = BackboneConfig(input_dim=4, encoder_widths=(3,), classifier_widths=(3,), epochs=8, patience=2)
    res = backbone.train_backbone(X, y, cfg, X[:10], y[:10])
    assert len(res.val_curve) == len(res.loss_curve)
    assert res.val_curve[res.best_epoch] == min(res.val_curve)


def test_diagnosis_dataset_examples():
    B, Cog, CE, MRI = ExamKind.Base, ExamKind.Cog, ExamKind.CE, ExamKind.MRI
    from openclinical import strategy

    v = make_visit(["Base", "Cog", "CE", "MRI"], width=4, label="CN")
    X, y, origin = backbone.build_diagnosis_dataset([v], [strategy.enumerate_strategies(v)], 4)
    assert X.shape == (8, 13 * 4 + 13) and y.tolist() == [1] * 8
    X, y, _ = backbone.build_diagnosis_dataset([v], [StrategySet(())], 4)
    assert X.shape[0] == 0
    a = make_visit(["Base", "Cog", "CE"], width=4, label="AD", subject="A")
    b = make_visit(["Base", "Cog", "MRI"], width=4, label="CN", subject="B")
    four = [StrategySet(({B}, {B, Cog}, {B, k}, {B, Cog, k})) for k in (CE, MRI)]
    X, y, origin = backbone.build_diagnosis_dataset([a, b], four, 4)
    assert X.shape[0] == 8 and y.tolist() == [0] * 4 + [1] * 4
    u = make_visit(["Base"], width=4, label="Unknown", subtype="SMC")
    with pytest.raises(ValueError):
        backbone.build_diagnosis_dataset([u], [StrategySet(({B},))], 4)
