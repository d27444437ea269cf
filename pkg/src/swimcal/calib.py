"""Proposer-driven calibration with a backtracking line search.

Each round asks the proposer for a candidate ``theta'``, forms the direction
``delta = theta' - theta_best`` in physical units and evaluates
``clip(theta_best + beta**k * delta)`` for k = 0, 1, ..., K-1, accepting the
first strict improvement. Every evaluation (including the initial point) is
charged to the budget.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from swimcal import params as P
from swimcal.proposer import HistoryEntry, Proposer, ProposerContext, ProposerError

log = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LineSearchConfig:
    beta: float = 0.5
    max_steps: int = 3

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise ValueError("max_steps must be an integer >= 1")

    def multipliers(self):
        return [self.beta**k for k in range(self.max_steps)]


@dataclass(frozen=True)
class CalibConfig:
    line_search: LineSearchConfig = field(default_factory=LineSearchConfig)
    max_consecutive_failures: int = 5


@dataclass
class RoundOutcome:
    round: int
    delta: np.ndarray
    multipliers: list
    losses: list
    accepted: bool
    accepted_multiplier: float | None = None
    accepted_theta: np.ndarray | None = None
    proposal: np.ndarray | None = None
    rationale: str = ""
    best_result: object = field(default=None, repr=False, compare=False)

    @property
    def evaluations(self) -> int:
        return len(self.losses)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "proposal": None if self.proposal is None else self.proposal.tolist(),
            "rationale": self.rationale,
            "delta": self.delta.tolist(),
            "multipliers": list(self.multipliers),
            "losses": list(self.losses),
            "accepted": self.accepted,
            "accepted_multiplier": self.accepted_multiplier,
            "accepted_theta": None if self.accepted_theta is None else self.accepted_theta.tolist(),
            "evaluations": self.evaluations,
        }

    @classmethod
    def from_dict(cls, d) -> "RoundOutcome":
        return cls(
            round=d["round"],
            delta=np.asarray(d["delta"], dtype=float),
            multipliers=list(d["multipliers"]),
            losses=[_inf(v) for v in d["losses"]],
            accepted=d["accepted"],
            accepted_multiplier=d["accepted_multiplier"],
            accepted_theta=None if d["accepted_theta"] is None else np.asarray(d["accepted_theta"], dtype=float),
            proposal=None if d["proposal"] is None else np.asarray(d["proposal"], dtype=float),
            rationale=d.get("rationale", ""),
        )


@dataclass
class RunRecord:
    method: str
    seed: int
    budget: int
    config: dict
    initial_theta: np.ndarray
    initial_loss: float
    theta_best: np.ndarray
    loss_best: float
    curve: list
    evaluations: list
    rounds: list = field(default_factory=list)
    proposer_internal_evals: int = 0
    aborted: bool = False
    abort_reason: str | None = None
    events: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    @property
    def charged_evaluations(self) -> int:
        return len(self.evaluations)

    def check(self) -> None:
        """Assert the structural invariants of a finished record."""
        c = np.asarray(self.curve, dtype=float)
        if np.any(np.diff(c) > 0):
            raise AssertionError("best-so-far curve increases")
        if not self.aborted and len(c) != self.budget:
            raise AssertionError(f"curve length {len(c)} != budget {self.budget}")
        if len(c) and c[-1] != self.loss_best:
            raise AssertionError("final curve value differs from loss_best")

    def to_dict(self) -> dict:
        return {
            "schema_version": RECORD_SCHEMA_VERSION,
            "method": self.method,
            "seed": self.seed,
            "budget": self.budget,
            "config": self.config,
            "initial_theta": self.initial_theta.tolist(),
            "initial_loss": self.initial_loss,
            "theta_best": self.theta_best.tolist(),
            "loss_best": self.loss_best,
            "curve": list(self.curve),
            "evaluations": self.evaluations,
            "rounds": [r.to_dict() for r in self.rounds],
            "accept_stats": accept_stats(self) if self.rounds or self.method.startswith("swim2real") else None,
            "proposer_internal_evals": self.proposer_internal_evals,
            "charged_evaluations": self.charged_evaluations,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "events": self.events,
        }

    @classmethod
    def from_dict(cls, d) -> "RunRecord":
        return cls(
            method=d["method"],
            seed=d["seed"],
            budget=d["budget"],
            config=d["config"],
            initial_theta=np.asarray(d["initial_theta"], dtype=float),
            initial_loss=_inf(d["initial_loss"]),
            theta_best=np.asarray(d["theta_best"], dtype=float),
            loss_best=_inf(d["loss_best"]),
            curve=[_inf(v) for v in d["curve"]],
            evaluations=[dict(e, loss=_inf(e["loss"])) for e in d["evaluations"]],
            rounds=[RoundOutcome.from_dict(r) for r in d["rounds"]],
            proposer_internal_evals=d["proposer_internal_evals"],
            aborted=d["aborted"],
            abort_reason=d["abort_reason"],
            events=d.get("events", []),
        )


def _inf(v):
    return math.inf if v is None else float(v)


class BudgetTracker:
    """Charges evaluations against a fixed budget and keeps the best-so-far curve."""

    def __init__(self, evaluator, budget: int):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.evaluator = evaluator
        self.budget = int(budget)
        self.evaluations = []
        self.curve = []
        self.best_theta = None
        self.best_loss = math.inf
        self.best_result = None
        self.eval_seconds = 0.0

    @property
    def used(self) -> int:
        return len(self.evaluations)

    @property
    def remaining(self) -> int:
        return self.budget - self.used

    def __call__(self, theta, phase: str = ""):
        if self.remaining <= 0:
            raise RuntimeError("evaluation budget exhausted")
        theta = np.asarray(theta, dtype=float).copy()
        t0 = time.perf_counter()
        res = self.evaluator(theta)
        self.eval_seconds += time.perf_counter() - t0
        loss = float(res.loss)
        if math.isnan(loss):
            loss = math.inf
        self.evaluations.append({"index": self.used + 1, "phase": phase, "theta": theta.tolist(), "loss": loss})
        if self.best_theta is None or loss < self.best_loss:
            self.best_theta, self.best_loss, self.best_result = theta, loss, res
        self.curve.append(self.best_loss)
        return res


def backtrack(theta_best, loss_best, delta, cfg: LineSearchConfig, bounds: P.ParamBounds, evaluator,
              budget: int, round_index: int = 0) -> RoundOutcome:
    """Try ``clip(theta_best + beta**k * delta)`` until the loss strictly drops.

    At most ``min(K, budget)`` evaluations. An all-zero direction is evaluated
    once and rejected since every step would revisit ``theta_best``.
    """
    if budget < 1:
        raise ValueError("backtracking needs at least one evaluation of budget")
    theta_best = np.asarray(theta_best, dtype=float)
    delta = np.asarray(delta, dtype=float)
    n_steps = min(cfg.max_steps, int(budget))
    if not np.any(delta):
        n_steps = 1
    multipliers, losses = [], []
    for k in range(n_steps):
        mult = cfg.beta**k
        cand = P.clip(theta_best + mult * delta, bounds)
        res = evaluator(cand)
        multipliers.append(mult)
        losses.append(float(res.loss))
        if res.loss < loss_best:
            return RoundOutcome(round_index, delta, multipliers, losses, True, mult, cand, best_result=res)
    return RoundOutcome(round_index, delta, multipliers, losses, False)


def _context(round_index, remaining, theta_best, loss_best, best_res, bounds, history):
    errors = getattr(best_res, "errors", np.zeros((0, 9)))
    freqs = getattr(best_res, "frequencies", np.zeros(0))
    return ProposerContext(
        round=round_index,
        budget_remaining=remaining,
        theta_best=theta_best.copy(),
        loss_best=loss_best,
        bounds=bounds,
        error_matrix=errors,
        frequencies=freqs,
        sim_velocity=getattr(best_res, "sim_velocity", np.zeros(0)),
        real_velocity=getattr(best_res, "real_velocity", np.zeros(0)),
        worst_frequency=best_res.worst_frequency() if hasattr(best_res, "worst_frequency") else None,
        history=list(history),
    )


def proposer_round(tracker: BudgetTracker, proposer: Proposer, ls: LineSearchConfig, bounds, history, rounds):
    """One propose-and-line-search round on the tracker's current best point.

    Returns the RoundOutcome, or raises ProposerError without charging budget.
    """
    idx = len(rounds)
    ctx = _context(idx, tracker.remaining, tracker.best_theta, tracker.best_loss,
                   tracker.best_result, bounds, history)
    prop = proposer.propose(ctx)
    if prop.theta.shape != (bounds.dim,):
        raise ProposerError(f"proposal has {prop.theta.size} components, expected {bounds.dim}")
    theta_best = tracker.best_theta
    delta = prop.theta - theta_best
    out = backtrack(theta_best, tracker.best_loss, delta, ls, bounds,
                    lambda th: tracker(th, f"round {idx}"), tracker.remaining, idx)
    out.proposal = prop.theta.copy()
    out.rationale = prop.rationale
    rounds.append(out)
    history.append(HistoryEntry(delta, out.accepted_multiplier, out.accepted,
                                out.losses[-1] if out.accepted else None))
    return out


def run_calibration(cfg: CalibConfig, proposer: Proposer, evaluator, bounds: P.ParamBounds, budget: int,
                    seed: int, method: str = "swim2real", init_theta=None) -> RunRecord:
    """Calibrate from the seed-matched random start until the budget is spent."""
    t_start = time.perf_counter()
    tracker = BudgetTracker(evaluator, budget)
    theta0 = P.random_init(seed, bounds) if init_theta is None else np.asarray(init_theta, dtype=float)
    init = tracker(theta0, "init")
    history, rounds, events = [], [], []
    failures = 0
    aborted, reason = False, None
    proposer_seconds = 0.0
    while tracker.remaining > 0:
        t0 = time.perf_counter()
        try:
            before = tracker.eval_seconds
            proposer_round(tracker, proposer, cfg.line_search, bounds, history, rounds)
            proposer_seconds += time.perf_counter() - t0 - (tracker.eval_seconds - before)
            failures = 0
        except ProposerError as exc:
            proposer_seconds += time.perf_counter() - t0
            failures += 1
            events.append(f"proposer failure {failures} before round {len(rounds)}: {exc}")
            log.warning("proposer failure %d: %s", failures, exc)
            if failures >= cfg.max_consecutive_failures:
                aborted, reason = True, "proposer_failure"
                break

    ls = cfg.line_search
    rec = RunRecord(
        method=method,
        seed=int(seed),
        budget=int(budget),
        config={"beta": ls.beta, "max_steps": ls.max_steps, "proposer": proposer.name,
                "max_consecutive_failures": cfg.max_consecutive_failures},
        initial_theta=theta0.copy(),
        initial_loss=float(init.loss),
        theta_best=tracker.best_theta.copy(),
        loss_best=tracker.best_loss,
        curve=list(tracker.curve),
        evaluations=tracker.evaluations,
        rounds=rounds,
        proposer_internal_evals=proposer.internal_evals,
        aborted=aborted,
        abort_reason=reason,
        events=events,
        timing={"total_s": time.perf_counter() - t_start, "evaluation_s": tracker.eval_seconds,
                "proposer_s": proposer_seconds},
    )
    rec.check()
    return rec


def accept_stats(record: RunRecord) -> dict:
    """Accept rate, accepted-multiplier histogram and evaluations per accepted round.

    Rates are None when there is nothing to divide by.
    """
    rounds = record.rounds
    n = len(rounds)
    accepted = [r for r in rounds if r.accepted]
    loop_evals = sum(r.evaluations for r in rounds)
    counts = Counter(r.accepted_multiplier for r in accepted)
    hist = [
        {"multiplier": m, "count": c, "fraction": c / len(accepted)}
        for m, c in sorted(counts.items(), key=lambda kv: -kv[0])
    ]
    return {
        "rounds": n,
        "accepted": len(accepted),
        "accept_rate": len(accepted) / n if n else None,
        "multiplier_histogram": hist,
        "evals_per_round": loop_evals / n if n else None,
        "evals_per_accepted": loop_evals / len(accepted) if accepted else None,
    }


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _sanitize(obj):
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    """Deterministic JSON; non-finite numbers become null (null loss = diverged)."""
    return json.dumps(_sanitize(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def save_record(record: RunRecord, path) -> None:
    """Write ``<name>.json``, the curve CSV ``<name>.curve.csv`` and the ``<name>.timing.json`` sidecar."""
    path = Path(path)
    write_atomic(path, dumps(record.to_dict()))
    lines = ["eval_index,best_loss"] + [f"{i},{_fmt(v)}" for i, v in enumerate(record.curve, 1)]
    write_atomic(path.with_suffix(".curve.csv"), "\n".join(lines) + "\n")
    write_atomic(path.with_suffix(".timing.json"), json.dumps(record.timing, indent=1, sort_keys=True) + "\n")


def _fmt(v):
    return repr(float(v)) if math.isfinite(v) else "inf"


def load_record(path) -> RunRecord:
    return RunRecord.from_dict(json.loads(Path(path).read_text()))


def read_curve_csv(path) -> list:
    with open(path, newline="") as fh:
        return [float(row["best_loss"]) for row in csv.DictReader(fh)]
