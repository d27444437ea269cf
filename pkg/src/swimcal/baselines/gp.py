"""Exact Gaussian-process regression with an ARD Matern-5/2 kernel."""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

MAX_JITTER = 1e-2
_SQRT5 = math.sqrt(5.0)


class GPFitError(RuntimeError):
    pass


def matern52(X1, X2, lengthscales, signal_var):
    """k(x, x') = sf2 (1 + sqrt5 r + 5 r^2 / 3) exp(-sqrt5 r), r = |(x - x') / ls|."""
    X1 = np.atleast_2d(X1) / lengthscales
    X2 = np.atleast_2d(X2) / lengthscales
    d2 = np.sum(X1**2, 1)[:, None] + np.sum(X2**2, 1)[None, :] - 2.0 * X1 @ X2.T
    r = np.sqrt(np.maximum(d2, 0.0))
    return signal_var * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-_SQRT5 * r)


def _factor(K, jitter):
    """Cholesky of K + jitter I, raising the jitter tenfold on failure up to MAX_JITTER."""
    n = K.shape[0]
    j = jitter
    while True:
        try:
            return cholesky(K + j * np.eye(n), lower=True), j
        except np.linalg.LinAlgError:
            if j >= MAX_JITTER:
                raise GPFitError(f"kernel matrix not positive definite even with jitter {j:g}") from None
            j = min(j * 10.0, MAX_JITTER)


def gp_posterior(X, y, Xq, lengthscales, signal_var=1.0, jitter=1e-8):
    """Posterior mean and variance (clamped at 0) of a zero-mean GP at ``Xq``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    ls = np.broadcast_to(np.asarray(lengthscales, dtype=float), (X.shape[1],))
    if X.shape[0] < 1:
        raise ValueError("need at least one training point")
    if np.any(ls <= 0) or signal_var <= 0:
        raise ValueError("kernel parameters must be positive")
    L, _ = _factor(matern52(X, X, ls, signal_var), jitter)
    alpha = cho_solve((L, True), y)
    Ks = matern52(X, Xq, ls, signal_var)
    mean = Ks.T @ alpha
    v = solve_triangular(L, Ks, lower=True)
    var = signal_var - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


def log_marginal_likelihood(X, y, lengthscales, signal_var, jitter=1e-8):
    X = np.atleast_2d(X)
    L, _ = _factor(matern52(X, X, lengthscales, signal_var), jitter)
    alpha = cho_solve((L, True), y)
    n = len(y)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi))


LOG_LS_RANGE = (math.log(0.01), math.log(10.0))
LOG_SF2_RANGE = (math.log(0.05), math.log(20.0))


def fit_hyperparameters(X, y, rng, n_steps=50, n_starts=2, init=None, jitter=1e-8):
    """Coordinate ascent on the log marginal likelihood in log-parameter space.

    ``n_steps`` coordinate moves are split across ``n_starts`` starting points
    (the first is ``init`` or a neutral default, the rest log-uniform random).
    A move is kept only if it raises the likelihood. Returns
    ``(lengthscales, signal_var, lml, trace)`` where ``trace`` lists the
    likelihood after every accepted move of the winning start.
    """
    X = np.atleast_2d(X)
    d = X.shape[1]
    lo = np.array([LOG_LS_RANGE[0]] * d + [LOG_SF2_RANGE[0]])
    hi = np.array([LOG_LS_RANGE[1]] * d + [LOG_SF2_RANGE[1]])
    starts = []
    if init is not None:
        starts.append(np.concatenate([np.log(init[0]), [math.log(init[1])]]))
    else:
        starts.append(np.concatenate([np.full(d, math.log(0.5)), [0.0]]))
    while len(starts) < n_starts:
        starts.append(lo + rng.random(d + 1) * (hi - lo))

    def lml(p):
        try:
            return log_marginal_likelihood(X, y, np.exp(p[:d]), math.exp(p[d]), jitter)
        except GPFitError:
            return -math.inf

    per_start = max(1, n_steps // n_starts)
    best = None
    for p0 in starts:
        p = np.clip(p0, lo, hi)
        cur = lml(p)
        trace = [cur]
        step = np.full(d + 1, 0.5)
        for s in range(per_start):
            i = s % (d + 1)
            cands = []
            for sign in (1.0, -1.0):
                q = p.copy()
                q[i] = np.clip(q[i] + sign * step[i], lo[i], hi[i])
                cands.append((lml(q), q))
            val, q = max(cands, key=lambda c: c[0])
            if val > cur:
                p, cur = q, val
                trace.append(cur)
            else:
                step[i] *= 0.5
        if best is None or cur > best[2]:
            best = (np.exp(p[:d]), math.exp(p[d]), cur, trace)
    return best
