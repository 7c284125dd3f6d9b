"""Hot numeric kernels with a numba path and a pure-numpy path.

Both paths expose the same functions. ``NUMPY`` and ``NUMBA`` namespaces
make either one callable directly (tests and the benchmark compare them);
the module-level names dispatch according to ``GUI_FEDSIM_JIT``.

Server update kernels never mutate their inputs.
"""
from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np

from ._jit import NUMBA_AVAILABLE, USE_NUMBA, njit

# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _np_softmax_xent(W, X, y):
    """Mean cross-entropy of a linear softmax model and its gradient.

    ``W`` is (C, D+1) with the bias in the last column, ``X`` is (n, D),
    ``y`` holds integer labels. Returns ``(loss, grad)`` with grad shaped
    like ``W``.
    """
    n = X.shape[0]
    logits = X @ W[:, :-1].T + W[:, -1]
    logits = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    z = expl.sum(axis=1, keepdims=True)
    probs = expl / z
    rows = np.arange(n)
    loss = float(np.mean(np.log(z[:, 0]) - logits[rows, y]))
    probs[rows, y] -= 1.0
    probs /= n
    grad = np.empty_like(W)
    grad[:, :-1] = probs.T @ X
    grad[:, -1] = probs.sum(axis=0)
    return loss, grad


def _np_predict(W, X):
    return np.argmax(X @ W[:, :-1].T + W[:, -1], axis=1)


def _np_weighted_sum(deltas, weights):
    return weights @ deltas


def _np_adagrad(x, v, delta, lr, tau):
    v_new = v + delta * delta
    x_new = x + lr * delta / (np.sqrt(v_new) + tau)
    return x_new, v_new


def _np_adam(x, m, v, delta, beta1, beta2, lr, tau):
    m_new = beta1 * m + (1.0 - beta1) * delta
    v_new = beta2 * v + (1.0 - beta2) * (delta * delta)
    x_new = x + lr * m_new / (np.sqrt(v_new) + tau)
    return x_new, m_new, v_new


def _np_yogi(x, m, v, delta, beta1, beta2, lr, tau):
    d2 = delta * delta
    m_new = beta1 * m + (1.0 - beta1) * delta
    v_new = v - (1.0 - beta2) * d2 * np.sign(v - d2)
    x_new = x + lr * m_new / (np.sqrt(v_new) + tau)
    return x_new, m_new, v_new


NUMPY = SimpleNamespace(
    name="numpy",
    softmax_xent=_np_softmax_xent,
    predict=_np_predict,
    weighted_sum=_np_weighted_sum,
    adagrad=_np_adagrad,
    adam=_np_adam,
    yogi=_np_yogi,
)

# ---------------------------------------------------------------------------
# numba path: explicit loops, same arithmetic per element
# ---------------------------------------------------------------------------


@njit
def _nb_softmax_xent(W, X, y):
    n, d = X.shape
    c = W.shape[0]
    grad = np.zeros_like(W)
    logits = np.empty(c)
    loss = 0.0
    for i in range(n):
        mx = -np.inf
        for k in range(c):
            s = W[k, d]
            for j in range(d):
                s += W[k, j] * X[i, j]
            logits[k] = s
            if s > mx:
                mx = s
        lab = y[i]
        shifted_lab = logits[lab] - mx
        z = 0.0
        for k in range(c):
            logits[k] = math.exp(logits[k] - mx)
            z += logits[k]
        loss += math.log(z) - shifted_lab
        for k in range(c):
            g = logits[k] / z
            if k == lab:
                g -= 1.0
            g /= n
            for j in range(d):
                grad[k, j] += g * X[i, j]
            grad[k, d] += g
    return loss / n, grad


@njit
def _nb_predict(W, X):
    n, d = X.shape
    c = W.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = -np.inf
        arg = 0
        for k in range(c):
            s = W[k, d]
            for j in range(d):
                s += W[k, j] * X[i, j]
            if s > best:
                best = s
                arg = k
        out[i] = arg
    return out


@njit
def _nb_weighted_sum(deltas, weights):
    k, d = deltas.shape
    out = np.zeros(d)
    for i in range(k):
        w = weights[i]
        for j in range(d):
            out[j] += w * deltas[i, j]
    return out


@njit
def _nb_adagrad(x, v, delta, lr, tau):
    x_new = np.empty_like(x)
    v_new = np.empty_like(v)
    for j in range(x.shape[0]):
        v_new[j] = v[j] + delta[j] * delta[j]
        x_new[j] = x[j] + lr * delta[j] / (math.sqrt(v_new[j]) + tau)
    return x_new, v_new


@njit
def _nb_adam(x, m, v, delta, beta1, beta2, lr, tau):
    x_new = np.empty_like(x)
    m_new = np.empty_like(m)
    v_new = np.empty_like(v)
    for j in range(x.shape[0]):
        m_new[j] = beta1 * m[j] + (1.0 - beta1) * delta[j]
        v_new[j] = beta2 * v[j] + (1.0 - beta2) * (delta[j] * delta[j])
        x_new[j] = x[j] + lr * m_new[j] / (math.sqrt(v_new[j]) + tau)
    return x_new, m_new, v_new


@njit
def _nb_yogi(x, m, v, delta, beta1, beta2, lr, tau):
    x_new = np.empty_like(x)
    m_new = np.empty_like(m)
    v_new = np.empty_like(v)
    for j in range(x.shape[0]):
        d2 = delta[j] * delta[j]
        diff = v[j] - d2
        sgn = 1.0 if diff > 0.0 else (-1.0 if diff < 0.0 else 0.0)
        m_new[j] = beta1 * m[j] + (1.0 - beta1) * delta[j]
        v_new[j] = v[j] - (1.0 - beta2) * d2 * sgn
        x_new[j] = x[j] + lr * m_new[j] / (math.sqrt(v_new[j]) + tau)
    return x_new, m_new, v_new


NUMBA = SimpleNamespace(
    name="numba" if NUMBA_AVAILABLE else "numba-unavailable",
    softmax_xent=_nb_softmax_xent,
    predict=_nb_predict,
    weighted_sum=_nb_weighted_sum,
    adagrad=_nb_adagrad,
    adam=_nb_adam,
    yogi=_nb_yogi,
)

ACTIVE = NUMBA if USE_NUMBA else NUMPY

softmax_xent = ACTIVE.softmax_xent
predict = ACTIVE.predict
weighted_sum = ACTIVE.weighted_sum
adagrad = ACTIVE.adagrad
adam = ACTIVE.adam
yogi = ACTIVE.yogi
