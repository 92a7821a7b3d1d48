"""Finite-difference and enumeration oracles shared by the test modules."""

import itertools

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(floor, np.max(np.abs(b))))


def _softmax_log(logits):
    logits = np.asarray(logits, dtype=float)
    return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))


def enumerate_paths(local, init_logits, trans_logits):
    """All (0-based path, log joint) pairs by brute force."""
    local = np.asarray(local, dtype=float)
    log_pi = _softmax_log(init_logits)
    log_A = _softmax_log(trans_logits)
    T, K = local.shape
    out = []
    for path in itertools.product(range(K), repeat=T):
        score = log_pi[path[0]] + local[0, path[0]]
        for t in range(1, T):
            score += log_A[path[t - 1], path[t]] + local[t, path[t]]
        out.append((path, score))
    return out


def brute_log_likelihood(local, init_logits, trans_logits) -> float:
    scores = np.array([s for _, s in enumerate_paths(local, init_logits, trans_logits)])
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()))


def brute_marginals(local, init_logits, trans_logits) -> np.ndarray:
    paths = enumerate_paths(local, init_logits, trans_logits)
    scores = np.array([s for _, s in paths])
    w = np.exp(scores - scores.max())
    w /= w.sum()
    T, K = np.asarray(local).shape
    marg = np.zeros((T, K))
    for (path, _), wi in zip(paths, w):
        marg[np.arange(T), list(path)] += wi
    return marg


def trapezoid(y, x) -> float:
    y, x = np.asarray(y), np.asarray(x)
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2)
