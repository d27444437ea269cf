"""Uniform random search."""

from __future__ import annotations

import time

from swimcal import params as P
from swimcal.calib import BudgetTracker, RunRecord


def fill_uniform(tracker: BudgetTracker, rng, bounds: P.ParamBounds, phase="random"):
    while tracker.remaining > 0:
        tracker(P.uniform_samples(rng, bounds, 1)[0], phase)


def run_random(bounds: P.ParamBounds, evaluator, budget: int, seed: int) -> RunRecord:
    """``budget`` iid uniform samples; the first is the seed-matched initial point."""
    t0 = time.perf_counter()
    tracker = BudgetTracker(evaluator, budget)
    rng = P.make_rng(seed)
    first = P.uniform_samples(rng, bounds, 1)[0]
    init = tracker(first, "init")
    fill_uniform(tracker, rng, bounds)
    rec = RunRecord(
        method="random",
        seed=int(seed),
        budget=int(budget),
        config={},
        initial_theta=first,
        initial_loss=float(init.loss),
        theta_best=tracker.best_theta.copy(),
        loss_best=tracker.best_loss,
        curve=list(tracker.curve),
        evaluations=tracker.evaluations,
        timing={"total_s": time.perf_counter() - t0, "evaluation_s": tracker.eval_seconds},
    )
    rec.check()
    return rec
