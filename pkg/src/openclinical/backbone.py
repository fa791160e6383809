"""The diagnosis network: encoder, mirrored decoder and classifier.

Decoder hidden outputs are concatenated into the input of the classifier
layer with the same index (switchable with ``concat_decoder``). The
penultimate classifier output is the embedding handed to OpenMax; the
final linear output is the activation vector.

Loss (averaged over the batch, weight penalty counted once)::

    alpha * cross_entropy + beta * sum(W**2) + mu * ||X - X_hat||^2
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .domain import KNOWN_LABELS, Label, StrategySet, VisitRecord, dense_input

log = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    input_dim: int
    encoder_widths: tuple = (64, 32)
    classifier_widths: tuple = (16, 8)
    n_classes: int = 2
    activation: str = "tanh"
    concat_decoder: bool = True
    alpha: float = 1.0
    beta: float = 1e-4
    mu: float = 0.5
    lr: float = 5e-4
    batch_size: int = 64
    epochs: int = 30
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.classifier_widths = tuple(int(w) for w in self.classifier_widths)
        n_hidden_dec = len(self.encoder_widths) - 1
        if self.concat_decoder and n_hidden_dec > len(self.classifier_widths) + 1:
            raise ValueError("more decoder hidden layers than classifier layers to feed")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["classifier_widths"] = list(self.classifier_widths)
        return d


@dataclass
class BackboneOutput:
    activation: np.ndarray
    embedding: np.ndarray
    reconstruction: np.ndarray


def _layer_dims(cfg: BackboneConfig):
    enc = [cfg.input_dim, *cfg.encoder_widths]
    dec = enc[::-1]
    n_dec_hidden = len(cfg.encoder_widths) - 1
    dec_hidden_widths = dec[1 : 1 + n_dec_hidden]
    cls_out = [*cfg.classifier_widths, cfg.n_classes]
    cls_in = []
    prev = cfg.encoder_widths[-1]
    for i, w in enumerate(cls_out):
        extra = dec_hidden_widths[i] if cfg.concat_decoder and i < n_dec_hidden else 0
        cls_in.append(prev + extra)
        prev = w
    return enc, dec, list(zip(cls_in, cls_out))


def init_params(cfg: BackboneConfig, seed: int | None = None) -> nn.Params:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    enc, dec, cls = _layer_dims(cfg)
    p: nn.Params = {}
    for i in range(len(enc) - 1):
        p[f"enc.{i}.W"] = nn.xavier(rng, enc[i], enc[i + 1])
        p[f"enc.{i}.b"] = np.zeros(enc[i + 1])
    for i in range(len(dec) - 1):
        p[f"dec.{i}.W"] = nn.xavier(rng, dec[i], dec[i + 1])
        p[f"dec.{i}.b"] = np.zeros(dec[i + 1])
    for i, (a, b) in enumerate(cls):
        p[f"cls.{i}.W"] = nn.xavier(rng, a, b)
        p[f"cls.{i}.b"] = np.zeros(b)
    return p


def _check_input(cfg, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != cfg.input_dim:
        raise ValueError(f"input width {X.shape[1]} does not match first layer {cfg.input_dim}")
    return X


def _forward(p, cfg, X):
    f, _ = nn.ACTIVATIONS[cfg.activation]
    n_enc = len(cfg.encoder_widths)
    n_cls = len(cfg.classifier_widths) + 1
    enc = [X]
    h = X
    for i in range(n_enc):
        h = f(h @ p[f"enc.{i}.W"] + p[f"enc.{i}.b"])
        enc.append(h)
    dec = [h]
    d = h
    for i in range(n_enc):
        pre = d @ p[f"dec.{i}.W"] + p[f"dec.{i}.b"]
        d = f(pre) if i < n_enc - 1 else pre
        dec.append(d)
    cls_in, cls_out = [], []
    c = enc[-1]
    for i in range(n_cls):
        inp = c
        if cfg.concat_decoder and i < n_enc - 1:
            inp = np.concatenate([c, dec[i + 1]], axis=1)
        pre = inp @ p[f"cls.{i}.W"] + p[f"cls.{i}.b"]
        c = f(pre) if i < n_cls - 1 else pre
        cls_in.append(inp)
        cls_out.append(c)
    return enc, dec, cls_in, cls_out


def forward(p: nn.Params, cfg: BackboneConfig, X) -> BackboneOutput:
    """Batch forward pass. ``X`` is (N, input_dim) or a single input vector."""
    single = np.ndim(X) == 1
    X = _check_input(cfg, X)
    enc, dec, _, cls_out = _forward(p, cfg, X)
    emb = cls_out[-2] if len(cls_out) > 1 else enc[-1]
    out = BackboneOutput(cls_out[-1], emb, dec[-1])
    if single:
        out = BackboneOutput(out.activation[0], out.embedding[0], out.reconstruction[0])
    return out


def cross_entropy(probs, y) -> float:
    """Mean categorical cross entropy of probability rows against integer labels."""
    probs = np.atleast_2d(probs)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    picked = probs[np.arange(y.shape[0]), y]
    return float(-np.mean(np.log(picked)))


def loss_terms(p, cfg, X, y) -> dict:
    X = _check_input(cfg, X)
    out = forward(p, cfg, X)
    y = np.asarray(y, dtype=np.int64)
    l1 = float(-np.mean(nn.log_softmax(out.activation)[np.arange(y.shape[0]), y]))
    l2 = float(sum(np.sum(v * v) for k, v in p.items() if k.endswith(".W")))
    l4 = float(np.mean(np.sum((X - out.reconstruction) ** 2, axis=1)))
    return {"l1": l1, "l2": l2, "l4": l4, "total": cfg.alpha * l1 + cfg.beta * l2 + cfg.mu * l4}


def loss_and_grad(p: nn.Params, cfg: BackboneConfig, X, y) -> tuple[float, nn.Params]:
    """Total loss and its gradient with respect to every parameter (reverse mode)."""
    X = _check_input(cfg, X)
    y = np.asarray(y, dtype=np.int64)
    N = X.shape[0]
    _, df = nn.ACTIVATIONS[cfg.activation]
    n_enc = len(cfg.encoder_widths)
    n_cls = len(cfg.classifier_widths) + 1
    enc, dec, cls_in, cls_out = _forward(p, cfg, X)

    logits = cls_out[-1]
    logp = nn.log_softmax(logits)
    l1 = -np.mean(logp[np.arange(N), y])
    resid = dec[-1] - X
    l4 = np.mean(np.sum(resid * resid, axis=1))
    l2 = sum(np.sum(v * v) for k, v in p.items() if k.endswith(".W"))
    total = cfg.alpha * l1 + cfg.beta * l2 + cfg.mu * l4

    g = {k: (2.0 * cfg.beta * v if k.endswith(".W") else np.zeros_like(v)) for k, v in p.items()}

    # classifier
    onehot = np.zeros_like(logits)
    onehot[np.arange(N), y] = 1.0
    d_out = cfg.alpha * (np.exp(logp) - onehot) / N
    d_dec_hidden = [np.zeros_like(dec[i + 1]) for i in range(n_enc - 1)]
    for i in range(n_cls - 1, -1, -1):
        d_pre = d_out if i == n_cls - 1 else d_out * df(cls_out[i])
        g[f"cls.{i}.W"] += cls_in[i].T @ d_pre
        g[f"cls.{i}.b"] += d_pre.sum(axis=0)
        d_in = d_pre @ p[f"cls.{i}.W"].T
        width_prev = cls_out[i - 1].shape[1] if i > 0 else enc[-1].shape[1]
        if cfg.concat_decoder and i < n_enc - 1:
            d_dec_hidden[i] += d_in[:, width_prev:]
        d_out = d_in[:, :width_prev]
    d_z = d_out

    # decoder
    d_h = cfg.mu * 2.0 * resid / N
    for i in range(n_enc - 1, -1, -1):
        d_pre = d_h if i == n_enc - 1 else d_h * df(dec[i + 1])
        g[f"dec.{i}.W"] += dec[i].T @ d_pre
        g[f"dec.{i}.b"] += d_pre.sum(axis=0)
        d_h = d_pre @ p[f"dec.{i}.W"].T
        if i > 0:
            d_h = d_h + d_dec_hidden[i - 1]
    d_z = d_z + d_h

    # encoder
    d_h = d_z
    for i in range(n_enc - 1, -1, -1):
        d_pre = d_h * df(enc[i + 1])
        g[f"enc.{i}.W"] += enc[i].T @ d_pre
        g[f"enc.{i}.b"] += d_pre.sum(axis=0)
        d_h = d_pre @ p[f"enc.{i}.W"].T
    return float(total), g


def predict_proba(p, cfg, X) -> np.ndarray:
    return nn.softmax(forward(p, cfg, _check_input(cfg, X)).activation)


@dataclass
class TrainResult:
    params: nn.Params
    loss_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    best_epoch: int = 0


def train_backbone(
    X,
    y,
    cfg: BackboneConfig,
    X_val=None,
    y_val=None,
    init: nn.Params | None = None,
    steps: int | None = None,
) -> TrainResult:
    """Adam on mini-batches. Early stopping watches the validation loss when given.

    ``loss_curve`` holds the mean training loss per epoch, or per step when
    ``steps`` is set (a fixed number of single-batch updates, no shuffling).
    """
    X = _check_input(cfg, X)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    if y.min() < 0 or y.max() >= cfg.n_classes:
        raise ValueError("labels must be known classes")
    rng = np.random.default_rng(cfg.seed)
    p = init_params(cfg) if init is None else {k: v.copy() for k, v in init.items()}
    opt = nn.Adam(p, lr=cfg.lr)
    res = TrainResult(p)
    if steps is not None:
        for _ in range(steps):
            loss, g = loss_and_grad(p, cfg, X, y)
            res.loss_curve.append(loss)
            opt.step(p, g)
        return res

    best, best_p, stale = np.inf, None, 0
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        tot = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, g = loss_and_grad(p, cfg, X[idx], y[idx])
            opt.step(p, g)
            tot += loss * idx.shape[0]
        res.loss_curve.append(tot / n)
        if X_val is not None and len(X_val):
            vl = loss_terms(p, cfg, X_val, y_val)["total"]
            res.val_curve.append(vl)
            if vl < best - 1e-9:
                best, best_p, stale, res.best_epoch = vl, {k: v.copy() for k, v in p.items()}, 0, epoch
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, res.best_epoch)
                    break
        log.debug("epoch %d loss %.5f", epoch, res.loss_curve[-1])
    if best_p is not None:
        res.params = best_p
    else:
        res.best_epoch = len(res.loss_curve) - 1
    return res


# --------------------------------------------------------------------------
# D_diagnosis
# --------------------------------------------------------------------------


def label_index(label: Label) -> int:
    return KNOWN_LABELS.index(Label(label))


def build_diagnosis_dataset(
    visits: Sequence[VisitRecord],
    strategies: Sequence[StrategySet],
    width: int,
) -> tuple[np.ndarray, np.ndarray, list]:
    """One labelled sample per (visit, strategy) pair.

    Returns the dense input matrix, integer labels (index into the known
    classes) and the ``(visit position, strategy)`` provenance of each row.
    """
    rows, labels, origin = [], [], []
    for vi, (v, ds) in enumerate(zip(visits, strategies)):
        if not v.label.is_known:
            raise ValueError(f"visit {v.subject_id}/{v.visit_index} is not a known class")
        for s in ds:
            rows.append(dense_input(v.subset(s), width))
            labels.append(label_index(v.label.cls))
            origin.append((vi, s))
    if not rows:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), []
    return np.vstack(rows), np.asarray(labels, dtype=np.int64), origin
