"""Examination recommender: sequence encoder over exam rows, dense predictor, 12 sigmoid heads.

Each present exam row becomes one time step (its feature values followed by
a one-hot of its kind), consumed in canonical order. The sequence summary
(last forward state and first backward state of the top bidirectional LSTM
layer) is joined with the diagnostic confidence vector and passed through
the dense predictor to the heads.

Loss, with per-head log-noise ``s_i = log(delta_i)``::

    sum_i [ exp(-2 s_i) / 2 * bce_i + s_i ],   bce_i = mean_n r_n * BCE(y_ni, p_ni)
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .domain import (
    N_ACTIONS,
    N_KINDS,
    N_KNOWN,
    ExamKind,
    FeatureRow,
    Observation,
    _freeze_rows,
)

log = logging.getLogger(__name__)


@dataclass
class RecommenderConfig:
    width: int
    hidden: int = 16
    lstm_layers: int = 3
    encoder: str = "lstm"  # or "meanpool"
    predictor_widths: tuple = (32,) * 13
    lr: float = 5e-4
    batch_size: int = 64
    epochs: int = 20
    forget_bias: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.predictor_widths = tuple(int(w) for w in self.predictor_widths)
        if self.encoder not in ("lstm", "meanpool"):
            raise ValueError(f"unknown encoder {self.encoder!r}")

    @property
    def step_dim(self) -> int:
        return self.width + N_KINDS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictor_widths"] = list(self.predictor_widths)
        return d


def init_params(cfg: RecommenderConfig, seed: int | None = None) -> nn.Params:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    H = cfg.hidden
    p: nn.Params = {}
    if cfg.encoder == "lstm":
        d_in = cfg.step_dim
        for l in range(cfg.lstm_layers):
            for tag in ("f", "b"):
                p[f"lstm.{l}.{tag}.Wx"] = nn.xavier(rng, d_in, 4 * H)
                p[f"lstm.{l}.{tag}.Wh"] = nn.xavier(rng, H, 4 * H)
                b = np.zeros(4 * H)
                b[H : 2 * H] = cfg.forget_bias
                p[f"lstm.{l}.{tag}.b"] = b
            d_in = 2 * H
    else:
        p["pool.W"] = nn.xavier(rng, cfg.step_dim, 2 * H)
        p["pool.b"] = np.zeros(2 * H)
    prev = 2 * H + N_KNOWN + 1
    for i, w in enumerate(cfg.predictor_widths):
        p[f"pred.{i}.W"] = nn.xavier(rng, prev, w)
        p[f"pred.{i}.b"] = np.zeros(w)
        prev = w
    p["head.W"] = nn.xavier(rng, prev, N_ACTIONS)
    p["head.b"] = np.zeros(N_ACTIONS)
    p["log_delta"] = np.zeros(N_ACTIONS)
    return p


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------


def sequence_of(rows: Mapping[ExamKind, FeatureRow] | Observation, width: int) -> np.ndarray:
    """(T, width + 13) step matrix, rows in canonical order regardless of insertion order."""
    rows = rows.rows if isinstance(rows, Observation) else _freeze_rows(rows)
    kinds = sorted(rows)
    seq = np.zeros((len(kinds), width + N_KINDS))
    for t, k in enumerate(kinds):
        v = rows[k].values
        if v.shape[0] != width:
            raise ValueError(f"{ExamKind(k).name}: width {v.shape[0]} != {width}")
        seq[t, :width] = v
        seq[t, width + int(k)] = 1.0
    return seq


@dataclass
class Batch:
    seqs: list  # list of (T_n, step_dim) arrays
    preds: np.ndarray  # (N, 3), engine order
    targets: np.ndarray  # (N, 12) multi-hot
    rewards: np.ndarray  # (N,)

    def __len__(self):
        return len(self.seqs)

    def take(self, idx) -> "Batch":
        return Batch([self.seqs[i] for i in idx], self.preds[idx], self.targets[idx], self.rewards[idx])


def batch_from_records(records: Sequence, width: int) -> Batch:
    """Batch from OARTuples (or anything carrying one as ``.tuple``, like reward records)."""
    records = [getattr(r, "tuple", r) for r in records]
    seqs = [sequence_of(r.obs, width) for r in records]
    preds = np.array([r.obs.pred for r in records]).reshape(-1, N_KNOWN + 1)
    targets = np.array([r.action_vector for r in records]).reshape(-1, N_ACTIONS)
    rewards = np.array([r.reward for r in records], dtype=np.float64)
    return Batch(seqs, preds, targets, rewards)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _encode_group(p, cfg, X):
    """Encode equal-length sequences X (N, T, D) -> (N, 2H) and a cache."""
    if cfg.encoder == "meanpool":
        h = np.tanh(X @ p["pool.W"] + p["pool.b"])
        return h.mean(axis=1), ("pool", X, h)
    caches = []
    inp = X
    for l in range(cfg.lstm_layers):
        hf, cf = nn.lstm_forward(inp, p[f"lstm.{l}.f.Wx"], p[f"lstm.{l}.f.Wh"], p[f"lstm.{l}.f.b"])
        hb, cb = nn.lstm_forward(inp, p[f"lstm.{l}.b.Wx"], p[f"lstm.{l}.b.Wh"], p[f"lstm.{l}.b.b"], reverse=True)
        caches.append((cf, cb))
        inp = np.concatenate([hf, hb], axis=2)
    H = cfg.hidden
    summary = np.concatenate([inp[:, -1, :H], inp[:, 0, H:]], axis=1)
    return summary, ("lstm", caches, inp.shape)


def _encode_group_backward(p, cfg, cache, d_summary, g):
    if cache[0] == "pool":
        _, X, h = cache
        T = X.shape[1]
        d_pre = (d_summary[:, None, :] / T) * (1.0 - h * h)
        g["pool.W"] += np.einsum("ntd,nth->dh", X, d_pre)
        g["pool.b"] += d_pre.sum(axis=(0, 1))
        return
    _, caches, shape = cache
    H = cfg.hidden
    d_top = np.zeros(shape)
    d_top[:, -1, :H] = d_summary[:, :H]
    d_top[:, 0, H:] += d_summary[:, H:]
    for l in range(cfg.lstm_layers - 1, -1, -1):
        cf, cb = caches[l]
        dXf, dWx, dWh, db = nn.lstm_backward(d_top[:, :, :H], cf)
        g[f"lstm.{l}.f.Wx"] += dWx
        g[f"lstm.{l}.f.Wh"] += dWh
        g[f"lstm.{l}.f.b"] += db
        dXb, dWx, dWh, db = nn.lstm_backward(d_top[:, :, H:], cb)
        g[f"lstm.{l}.b.Wx"] += dWx
        g[f"lstm.{l}.b.Wh"] += dWh
        g[f"lstm.{l}.b.b"] += db
        d_top = dXf + dXb


def _groups(seqs):
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(s.shape[0], []).append(i)
    return [(np.asarray(idx), np.stack([seqs[i] for i in idx])) for _, idx in sorted(by_len.items())]


def _forward(p, cfg, seqs, preds):
    N = len(seqs)
    summary = np.zeros((N, 2 * cfg.hidden))
    enc_caches = []
    for idx, X in _groups(seqs):
        s, c = _encode_group(p, cfg, X)
        summary[idx] = s
        enc_caches.append((idx, c))
    h = np.concatenate([summary, preds], axis=1)
    acts = [h]
    for i in range(len(cfg.predictor_widths)):
        h = np.tanh(h @ p[f"pred.{i}.W"] + p[f"pred.{i}.b"])
        acts.append(h)
    logits = h @ p["head.W"] + p["head.b"]
    return logits, acts, enc_caches


def head_probs(p: nn.Params, cfg: RecommenderConfig, seqs, preds) -> np.ndarray:
    logits, _, _ = _forward(p, cfg, list(seqs), np.atleast_2d(preds))
    return nn.sigmoid(logits)


def recommend(p: nn.Params, cfg: RecommenderConfig, obs: Observation) -> np.ndarray:
    """Per-exam recommendation probabilities, indexed like ``RECOMMENDABLE``."""
    return head_probs(p, cfg, [sequence_of(obs, cfg.width)], obs.pred[None, :])[0]


def _bce_terms(logits, targets):
    # numerically stable BCE from logits
    return np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


def loss_parts(p, cfg, batch: Batch) -> tuple[float, np.ndarray]:
    logits, _, _ = _forward(p, cfg, batch.seqs, batch.preds)
    bce = (batch.rewards[:, None] * _bce_terms(logits, batch.targets)).mean(axis=0)
    s = p["log_delta"]
    total = float(np.sum(0.5 * np.exp(-2.0 * s) * bce + s))
    return total, bce


def loss_and_grad(p: nn.Params, cfg: RecommenderConfig, batch: Batch) -> tuple[float, nn.Params]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    N = len(batch)
    logits, acts, enc_caches = _forward(p, cfg, batch.seqs, batch.preds)
    per = batch.rewards[:, None] * _bce_terms(logits, batch.targets)
    bce = per.mean(axis=0)
    s = p["log_delta"]
    w = 0.5 * np.exp(-2.0 * s)
    total = float(np.sum(w * bce + s))

    g = nn.zeros_like(p)
    g["log_delta"] = -2.0 * w * bce + 1.0
    d_logits = w[None, :] * batch.rewards[:, None] * (nn.sigmoid(logits) - batch.targets) / N
    g["head.W"] += acts[-1].T @ d_logits
    g["head.b"] += d_logits.sum(axis=0)
    d_h = d_logits @ p["head.W"].T
    for i in range(len(cfg.predictor_widths) - 1, -1, -1):
        d_pre = d_h * (1.0 - acts[i + 1] ** 2)
        g[f"pred.{i}.W"] += acts[i].T @ d_pre
        g[f"pred.{i}.b"] += d_pre.sum(axis=0)
        d_h = d_pre @ p[f"pred.{i}.W"].T
    d_summary = d_h[:, : 2 * cfg.hidden]
    for idx, cache in enc_caches:
        _encode_group_backward(p, cfg, cache, d_summary[idx], g)
    return total, g


@dataclass
class TrainResult:
    params: nn.Params
    loss_curve: list = field(default_factory=list)


def train_recommender(batch: Batch, cfg: RecommenderConfig, init: nn.Params | None = None) -> TrainResult:
    """Adam over shuffled mini-batches; one loss value per epoch in ``loss_curve``."""
    if len(batch) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    p = init_params(cfg) if init is None else {k: v.copy() for k, v in init.items()}
    opt = nn.Adam(p, lr=cfg.lr)
    res = TrainResult(p)
    n = len(batch)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        tot = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, g = loss_and_grad(p, cfg, batch.take(idx))
            opt.step(p, g)
            tot += loss * idx.shape[0]
        res.loss_curve.append(tot / n)
        log.debug("recommender epoch %d loss %.5f", epoch, res.loss_curve[-1])
    return res
