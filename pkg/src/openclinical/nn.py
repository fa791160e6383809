"""Small numpy building blocks shared by the two networks: init, activations, Adam, LSTM."""

from __future__ import annotations

import numpy as np

Params = dict  # name -> ndarray, insertion order is the canonical parameter order


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    m = a.max(axis=axis, keepdims=True)
    return a - m - np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


ACTIVATIONS = {
    # name -> (f, f' expressed through the output)
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "linear": (lambda x: x, lambda y: np.ones_like(y)),
}


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([v.ravel() for v in params.values()])


def unflatten_params(template: Params, flat: np.ndarray) -> Params:
    out, i = {}, 0
    for k, v in template.items():
        out[k] = flat[i : i + v.size].reshape(v.shape).copy()
        i += v.size
    return out


class Adam:
    def __init__(self, params: Params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = zeros_like(params)
        self.v = zeros_like(params)
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# --------------------------------------------------------------------------
# LSTM, one direction, full sequences of equal length
# --------------------------------------------------------------------------


def lstm_forward(X, Wx, Wh, b, reverse=False):
    """Run an LSTM over ``X`` (N, T, D). Gate order in the packed weights: i, f, g, o.

    Returns hidden states (N, T, H) in input time order and a cache for
    :func:`lstm_backward`.
    """
    N, T, _ = X.shape
    H = Wh.shape[0]
    h = np.zeros((N, H))
    c = np.zeros((N, H))
    hs = np.empty((N, T, H))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    cache = []
    for t in steps:
        z = X[:, t] @ Wx + h @ Wh + b
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = sigmoid(z[:, 3 * H :])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache.append((t, i, f, g, o, c_prev, h_prev, tc))
    return hs, (X, Wx, Wh, cache)


def lstm_backward(dhs, fwd_cache):
    X, Wx, Wh, cache = fwd_cache
    H = Wh.shape[0]
    dX = np.zeros_like(X)
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * H)
    dh_next = np.zeros((X.shape[0], H))
    dc_next = np.zeros((X.shape[0], H))
    for t, i, f, g, o, c_prev, h_prev, tc in reversed(cache):
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1
        )
        dWx += X[:, t].T @ dz
        dWh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dX[:, t] = dz @ Wx.T
        dh_next = dz @ Wh.T
        dc_next = dc * f
    return dX, dWx, dWh, db
