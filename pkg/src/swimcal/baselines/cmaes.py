"""(mu/mu_w, lambda)-CMA-ES in the normalized unit box with clip repair.

Standard default weights and learning rates (Hansen's tutorial). Candidates
are clipped to [0, 1] before evaluation and the clipped point is what the
update sees.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from swimcal import params as P
from swimcal.calib import BudgetTracker, RunRecord

log = logging.getLogger(__name__)


def default_popsize(dim: int) -> int:
    return 4 + int(math.floor(3 * math.log(dim)))


@dataclass(frozen=True)
class CmaesConfig:
    sigma0: float = 0.2
    popsize: int | None = None

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if self.popsize is not None and self.popsize < 4:
            raise ValueError("popsize must be >= 4")


class CMAES:
    def __init__(self, mean, sigma, popsize=None, rng=None):
        self.mean = np.array(mean, dtype=float)
        n = self.dim = self.mean.size
        self.sigma = float(sigma)
        self.lam = popsize or default_popsize(n)
        self.mu = self.lam // 2
        w = math.log((self.lam + 1) / 2) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / np.sum(self.weights**2)
        mueff = self.mueff
        self.cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        self.cs = (mueff + 2) / (n + mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + mueff)
        self.cmu = min(1 - self.c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self.rng = rng if rng is not None else P.make_rng(0)
        self.generation = 0
        self.events = []
        self._reset_covariance()

    def _reset_covariance(self):
        n = self.dim
        self.C = np.eye(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)

    def ask(self, z=None):
        """Sample ``lam`` candidates; ``z`` may supply the standard-normal draws (lam x n)."""
        if z is None:
            z = self.rng.standard_normal((self.lam, self.dim))
        y = (z * self.D) @ self.B.T
        return self.mean + self.sigma * y

    def tell(self, xs, fs):
        xs = np.asarray(xs, dtype=float)
        fs = np.asarray(fs, dtype=float)
        order = np.argsort(fs, kind="stable")[: self.mu]
        y = (xs[order] - self.mean) / self.sigma
        y_w = self.weights @ y
        self.mean = self.mean + self.sigma * y_w

        n = self.dim
        inv_sqrt_c = self.B @ np.diag(1.0 / self.D) @ self.B.T
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * (inv_sqrt_c @ y_w)
        ps_norm = np.linalg.norm(self.ps)
        hsig = ps_norm / math.sqrt(1 - (1 - self.cs) ** (2 * (self.generation + 1))) / self.chi_n < 1.4 + 2 / (n + 1)
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * y_w
        rank_mu = (y.T * self.weights) @ y
        c_old = (1 - self.c1 - self.cmu + (1 - hsig) * self.c1 * self.cc * (2 - self.cc)) * self.C
        self.C = c_old + self.c1 * np.outer(self.pc, self.pc) + self.cmu * rank_mu
        self.sigma *= math.exp((self.cs / self.damps) * (ps_norm / self.chi_n - 1))
        self.generation += 1
        self._decompose()

    def _decompose(self):
        C = 0.5 * (self.C + self.C.T)
        ok = np.all(np.isfinite(C)) and math.isfinite(self.sigma) and self.sigma > 0
        if ok:
            evals, evecs = np.linalg.eigh(C)
            ok = evals.min() > 0 and evals.max() / evals.min() < 1e14
        if not ok:
            msg = f"covariance degenerate at generation {self.generation}; reset to identity"
            log.warning(msg)
            self.events.append(msg)
            if not (math.isfinite(self.sigma) and self.sigma > 0):
                self.sigma = 0.2
            self._reset_covariance()
            return
        self.C = C
        self.B = evecs
        self.D = np.sqrt(evals)


def run_cmaes(cfg: CmaesConfig, bounds: P.ParamBounds, evaluator, budget: int, seed: int) -> RunRecord:
    """CMA-ES centred on the seed-matched initial point, exactly ``budget`` evaluations.

    Full generations run while the remaining budget covers a population; the
    leftover budget is spent on one partial generation that only updates the
    best-so-far record.
    """
    t0 = time.perf_counter()
    tracker = BudgetTracker(evaluator, budget)
    theta0 = P.random_init(seed, bounds)
    es = CMAES(P.normalize(theta0, bounds), cfg.sigma0, cfg.popsize, rng=P.make_rng([int(seed), 2]))
    full = 0
    while tracker.remaining >= es.lam:
        xs = np.clip(es.ask(), 0.0, 1.0)
        fs = [tracker(P.denormalize(x, bounds), f"gen {es.generation}").loss for x in xs]
        es.tell(xs, fs)
        full += 1
    if tracker.remaining > 0:
        xs = np.clip(es.ask(), 0.0, 1.0)[: tracker.remaining]
        for x in xs:
            tracker(P.denormalize(x, bounds), f"gen {es.generation} (partial)")
    first = tracker.evaluations[0]
    rec = RunRecord(
        method="cmaes",
        seed=int(seed),
        budget=int(budget),
        config={"sigma0": cfg.sigma0, "popsize": es.lam, "full_generations": full,
                "partial_generation_size": budget - full * es.lam, "mean0_theta": theta0.tolist()},
        initial_theta=np.asarray(first["theta"]),
        initial_loss=first["loss"],
        theta_best=tracker.best_theta.copy(),
        loss_best=tracker.best_loss,
        curve=list(tracker.curve),
        evaluations=tracker.evaluations,
        events=es.events,
        timing={"total_s": time.perf_counter() - t0, "evaluation_s": tracker.eval_seconds},
    )
    rec.check()
    return rec
