"""GP Bayesian optimization with expected improvement in the normalized box."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from swimcal import params as P
from swimcal.baselines.gp import fit_hyperparameters, gp_posterior
from swimcal.calib import BudgetTracker, RunRecord


@dataclass(frozen=True)
class BayesOptConfig:
    jitter: float = 1e-8
    xi: float = 0.01
    n_initial: int = 5
    n_candidates: int = 1024
    n_refine: int = 4
    hyper_steps: int = 50
    hyper_starts: int = 2

    def __post_init__(self):
        if not self.jitter > 0:
            raise ValueError("jitter must be positive")
        if self.n_initial < 1:
            raise ValueError("n_initial must be >= 1")


def expected_improvement(mean, var, best, xi=0.01):
    """EI for minimization; zero wherever the posterior is certain and no better than ``best - xi``."""
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    imp = best - mean - xi
    out = np.maximum(imp, 0.0)
    pos = sd > 0
    z = imp[pos] / sd[pos]
    out[pos] = imp[pos] * norm.cdf(z) + sd[pos] * norm.pdf(z)
    return out


def penalize_infinite(y):
    """Replace +inf losses by the worst finite loss plus three standard deviations."""
    y = np.asarray(y, dtype=float).copy()
    finite = np.isfinite(y)
    if finite.all():
        return y
    if not finite.any():
        y[:] = 1.0
        return y
    fy = y[finite]
    y[~finite] = fy.max() + 3.0 * (fy.std() if fy.size > 1 else max(abs(fy.max()), 1.0))
    return y


def standardize(y):
    if y.size < 2:
        return y - y.mean() if y.size else y
    sd = y.std()
    return (y - y.mean()) / (sd if sd > 0 else 1.0)


def _refine(x0, acq, steps=(0.1, 0.05, 0.02, 0.01), max_iter=8):
    """Greedy coordinate moves inside [0, 1] that raise the acquisition."""
    x = x0.copy()
    best = acq(x[None])[0]
    d = x.size
    for h in steps:
        for _ in range(max_iter):
            moves = np.repeat(x[None], 2 * d, axis=0)
            idx = np.arange(d)
            moves[idx, idx] += h
            moves[d + idx, idx] -= h
            moves = np.clip(moves, 0.0, 1.0)
            vals = acq(moves)
            j = int(np.argmax(vals))
            if vals[j] > best:
                x, best = moves[j], vals[j]
            else:
                break
    return x, best


def propose_next(X, y, cfg: BayesOptConfig, rng, hyper=None):
    """Fit the surrogate to (X in [0,1]^d, y) and return (argmax-EI point, hyperparameters)."""
    ys = standardize(penalize_infinite(y))
    ls, sf2, _, _ = fit_hyperparameters(X, ys, rng, cfg.hyper_steps, cfg.hyper_starts, init=hyper,
                                        jitter=cfg.jitter)
    best = ys.min()

    def acq(Q):
        m, v = gp_posterior(X, ys, Q, ls, sf2, cfg.jitter)
        return expected_improvement(m, v, best, cfg.xi)

    cands = rng.random((cfg.n_candidates, X.shape[1]))
    vals = acq(cands)
    top = np.argsort(-vals, kind="stable")[: cfg.n_refine]
    winner, win_val = cands[top[0]], vals[top[0]]
    for i in top:
        x, v = _refine(cands[i], acq)
        if v > win_val:
            winner, win_val = x, v
    return winner, (ls, sf2)


def run_bayesopt(cfg: BayesOptConfig, bounds: P.ParamBounds, evaluator, budget: int, seed: int) -> RunRecord:
    """Seeded uniform initial design (first point = seed-matched init), then EI steps."""
    if budget <= cfg.n_initial:
        raise ValueError(f"budget {budget} must exceed the initial design size {cfg.n_initial}")
    t0 = time.perf_counter()
    tracker = BudgetTracker(evaluator, budget)
    rng = P.make_rng(seed)
    design = P.uniform_samples(rng, bounds, cfg.n_initial)
    X, y = [], []
    for th in design:
        res = tracker(th, "initial design")
        X.append(P.normalize(th, bounds))
        y.append(res.loss)
    acq_rng = P.make_rng([int(seed), 3])
    hyper = None
    while tracker.remaining > 0:
        x, hyper = propose_next(np.array(X), np.array(y), cfg, acq_rng, hyper)
        res = tracker(P.denormalize(x, bounds), "acquisition")
        X.append(x)
        y.append(res.loss)
    rec = RunRecord(
        method="bayesopt",
        seed=int(seed),
        budget=int(budget),
        config={"kernel": "matern52", "acquisition": "ei", "xi": cfg.xi, "jitter": cfg.jitter,
                "n_initial": cfg.n_initial, "n_candidates": cfg.n_candidates,
                "deviation": "gp_hedge portfolio simplified to expected improvement"},
        initial_theta=design[0].copy(),
        initial_loss=float(tracker.evaluations[0]["loss"]),
        theta_best=tracker.best_theta.copy(),
        loss_best=tracker.best_loss,
        curve=list(tracker.curve),
        evaluations=tracker.evaluations,
        timing={"total_s": time.perf_counter() - t0, "evaluation_s": tracker.eval_seconds},
    )
    rec.check()
    return rec
