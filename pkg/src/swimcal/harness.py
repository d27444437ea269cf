"""Seed-matched method sweeps, summaries and report artifacts."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from swimcal import params as P
from swimcal.baselines import BayesOptConfig, CmaesConfig, run_bayesopt, run_cmaes, run_random
from swimcal.baselines.random_search import fill_uniform
from swimcal.calib import (
    BudgetTracker,
    CalibConfig,
    LineSearchConfig,
    RunRecord,
    accept_stats,
    dumps,
    load_record,
    proposer_round,
    run_calibration,
    save_record,
    write_atomic,
)
from swimcal.objective import (
    FREQUENCIES,
    Evaluator,
    ReferenceSet,
    draw_theta_star,
    evaluate,
    load_reference,
    mean_abs_velocity_error,
    save_reference,
    synthetic_reference,
)
from swimcal.proposer import GroundTruthOracle, ProposerError, RemoteProposer, ReplayProposer, SPSAOracle
from swimcal.swimsim import SimConfig

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
METHODS = ("random", "cmaes", "bayesopt", "swim2real", "swim2real_k1", "warmstart")
LOOP_METHODS = ("swim2real", "swim2real_k1", "warmstart")

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "methods"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": CONFIG_SCHEMA_VERSION},
        "reference": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"const": "synthetic"},
                        "theta_star_seed": {"type": "integer"},
                        "theta_star": {"type": "array", "items": {"type": "number"}, "minItems": 16, "maxItems": 16},
                        "noise_sigma": {"type": "number", "minimum": 0},
                        "noise_seed": {"type": "integer"},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "path"],
                    "properties": {"kind": {"const": "ingest"}, "path": {"type": "string"}},
                },
            ]
        },
        "methods": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name"],
                "properties": {
                    "name": {"enum": list(METHODS)},
                    "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "max_steps": {"type": "integer", "minimum": 1},
                    "sigma0": {"type": "number", "exclusiveMinimum": 0},
                    "popsize": {"type": "integer", "minimum": 4},
                    "n_initial": {"type": "integer", "minimum": 1},
                    "xi": {"type": "number", "minimum": 0},
                    "proposer": {
                        "type": "object",
                        "required": ["kind"],
                        "properties": {
                            "kind": {"enum": ["ground_truth", "spsa", "remote", "replay"]},
                            "overshoot": {"type": "number", "exclusiveMinimum": 0},
                            "direction_noise": {"type": "number", "minimum": 0},
                            "perturbation": {"type": "number", "exclusiveMinimum": 0},
                            "endpoint": {"type": "string"},
                            "timeout": {"type": "number", "exclusiveMinimum": 0},
                            "retries": {"type": "integer", "minimum": 0},
                            "path": {"type": "string"},
                        },
                    },
                },
            },
        },
        "budget": {"type": "integer", "minimum": 1},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "frequencies": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "duration": {"type": "number", "exclusiveMinimum": 0},
                "warmup": {"type": "number", "minimum": 0},
                "sample_rate": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "output_dir": {"type": "string"},
        "workers": {"type": "integer", "minimum": 1},
        "figures": {"type": "boolean"},
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    methods: list
    reference: dict = field(default_factory=lambda: {"kind": "synthetic", "theta_star_seed": 0, "noise_sigma": 0.0})
    budget: int = 40
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    frequencies: list = field(default_factory=lambda: list(FREQUENCIES))
    sim: dict = field(default_factory=dict)
    output_dir: str = "swimcal_out"
    workers: int = 1
    figures: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(d, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"invalid config: {exc.message} (at {list(exc.absolute_path)})") from None
        kw = {k: copy.deepcopy(v) for k, v in d.items() if k != "schema_version"}
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d)

    def validate(self) -> None:
        f = np.asarray(self.frequencies, dtype=float)
        if f.size == 0 or np.any(f <= 0) or np.any(np.diff(f) <= 0):
            raise ConfigError("frequencies must be non-empty, positive and strictly increasing")
        if not self.methods or not self.seeds:
            raise ConfigError("need at least one method and one seed")
        names = [m["name"] for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError("each method may appear once")
        for m in self.methods:
            if m["name"] in LOOP_METHODS:
                prop = m.get("proposer")
                if prop is None:
                    raise ConfigError(f"method {m['name']} needs a proposer")
                if prop["kind"] == "ground_truth" and self.reference.get("kind") != "synthetic":
                    raise ConfigError("the ground_truth proposer requires a synthetic reference")
                if prop["kind"] == "remote" and "endpoint" not in prop:
                    raise ConfigError("remote proposer needs an endpoint")
                if prop["kind"] == "replay" and "path" not in prop:
                    raise ConfigError("replay proposer needs a path")
            if m["name"] == "bayesopt" and self.budget <= m.get("n_initial", 5):
                raise ConfigError("bayesopt needs a budget larger than its initial design")
        try:
            self.sim_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def sim_config(self) -> SimConfig:
        return SimConfig(**self.sim)

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "reference": self.reference,
            "methods": self.methods,
            "budget": self.budget,
            "seeds": list(self.seeds),
            "frequencies": list(self.frequencies),
            "sim": self.sim_config().to_dict(),
            "output_dir": self.output_dir,
            "workers": self.workers,
            "figures": self.figures,
        }


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def auc(curve) -> float:
    """Mean of a best-so-far curve. Raises ValueError if the curve ever increases."""
    c = np.asarray(curve, dtype=float)
    if c.size == 0:
        raise ValueError("empty curve")
    if np.any(np.diff(c) > 0):
        raise ValueError("best-so-far curve must be non-increasing")
    return float(c.mean())


def _std(values):
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return 0.0
    return float(v.std(ddof=1)) if np.all(np.isfinite(v)) else math.nan


def velocity_sweep(thetas: dict, ref: ReferenceSet, cfg: SimConfig) -> dict:
    """Per-frequency |v_sim - v_real| for each method's parameters, plus MAE (mm/s).

    Diverged frequencies are reported as inf and left out of the MAE.
    """
    out = {}
    for method, theta in thetas.items():
        res = evaluate(theta, ref, cfg)
        rows = []
        for f, vs, vr, div in zip(ref.frequencies, res.sim_velocity, ref.velocities, res.diverged):
            err = math.inf if div else abs(vs - vr) * 1000.0
            rows.append({"frequency_hz": float(f), "v_sim_m_s": float(vs) if not div else math.inf,
                         "v_real_m_s": float(vr), "abs_error_mm_s": err})
        ok = [r["abs_error_mm_s"] for r in rows if math.isfinite(r["abs_error_mm_s"])]
        out[method] = {
            "rows": rows,
            "mae_mm_s": float(np.mean(ok)) if ok else math.inf,
            "n_diverged": len(rows) - len(ok),
        }
    return out


def summarize(records: list, expected_seeds=None, sweep: dict | None = None) -> dict:
    """Table-style statistics per method from finished (non-aborted) records."""
    by_method = {}
    for rec in records:
        by_method.setdefault(rec.method, []).append(rec)
    summary = {}
    for method in sorted(by_method):
        recs = sorted(by_method[method], key=lambda r: r.seed)
        done = [r for r in recs if not r.aborted]
        seeds = [r.seed for r in done]
        missing = sorted(set(expected_seeds or []) - set(seeds)) if expected_seeds else []
        missing += [r.seed for r in recs if r.aborted and r.seed not in missing]
        finals = [r.loss_best for r in done]
        aucs = [auc(r.curve) for r in done]
        entry = {
            "seeds": seeds,
            "missing_seeds": sorted(set(missing)),
            "final_loss": finals,
            "auc_per_seed": aucs,
            "best_mean": float(np.mean(finals)) if finals else None,
            "best_std": _std(finals) if finals else None,
            "worst": float(np.max(finals)) if finals else None,
            "auc_mean": float(np.mean(aucs)) if aucs else None,
            "auc_std": _std(aucs) if aucs else None,
            "budget": sorted({r.charged_evaluations for r in done}),
        }
        if method in LOOP_METHODS:
            stats = [accept_stats(r) for r in done]
            rates = [s["accept_rate"] for s in stats if s["accept_rate"] is not None]
            n_rounds = sum(s["rounds"] for s in stats)
            n_acc = sum(s["accepted"] for s in stats)
            mult = {}
            for s in stats:
                for h in s["multiplier_histogram"]:
                    mult[h["multiplier"]] = mult.get(h["multiplier"], 0) + h["count"]
            entry["accept"] = {
                "mean_accept_rate": float(np.mean(rates)) if rates else None,
                "pooled_rounds": n_rounds,
                "pooled_accepted": n_acc,
                "pooled_accept_rate": n_acc / n_rounds if n_rounds else None,
                "multiplier_histogram": [
                    {"multiplier": m, "count": c, "fraction": c / n_acc}
                    for m, c in sorted(mult.items(), key=lambda kv: -kv[0])
                ],
                "proposer_internal_evals": sum(r.proposer_internal_evals for r in done),
            }
        if sweep and method in sweep:
            entry["velocity_mae_mm_s"] = sweep[method]["mae_mm_s"]
            entry["velocity_diverged_frequencies"] = sweep[method]["n_diverged"]
        summary[method] = entry

    def _key(m, k):
        v = summary[m].get(k)
        return math.inf if v is None else v

    return {
        "methods": summary,
        "ordering_by_final_loss": sorted(summary, key=lambda m: _key(m, "best_mean")),
        "ordering_by_velocity_mae": sorted(summary, key=lambda m: _key(m, "velocity_mae_mm_s")) if sweep else None,
        "deviations": ["bayesopt acquisition is expected improvement only (no gp_hedge portfolio)"],
    }


def best_thetas(records) -> dict:
    """Parameters of the lowest-final-loss seed of each method."""
    best = {}
    for rec in records:
        if rec.aborted:
            continue
        cur = best.get(rec.method)
        if cur is None or rec.loss_best < cur.loss_best:
            best[rec.method] = rec
    return {m: r.theta_best for m, r in sorted(best.items())}


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def build_reference(exp: ExperimentConfig, bounds=None) -> ReferenceSet:
    sim = exp.sim_config()
    bounds = bounds or P.swimmer_bounds()
    spec = exp.reference
    if spec["kind"] == "ingest":
        ref = load_reference(spec["path"], sim)
        if not np.allclose(ref.frequencies, exp.frequencies):
            raise ConfigError("ingested reference frequencies differ from the configured frequencies")
        return ref
    seed = int(spec.get("theta_star_seed", 0))
    if "theta_star" in spec:
        theta_star, draws = np.asarray(spec["theta_star"], dtype=float), 0
        if not bounds.contains(theta_star):
            raise ConfigError("theta_star lies outside the parameter bounds")
    else:
        theta_star, draws = draw_theta_star(seed, bounds, sim, exp.frequencies)
    return synthetic_reference(theta_star, sim, exp.frequencies, float(spec.get("noise_sigma", 0.0)),
                               int(spec.get("noise_seed", seed)),
                               {"theta_star_seed": seed, "rejection_draws": draws})


def make_proposer(spec: dict, ref: ReferenceSet, evaluator, bounds, seed: int, method: str):
    kind = spec["kind"]
    if kind == "ground_truth":
        return GroundTruthOracle(ref.provenance["theta_star"], bounds, spec.get("overshoot", 1.0),
                                 spec.get("direction_noise", 0.0), seed)
    if kind == "spsa":
        return SPSAOracle(evaluator.fork(), bounds, spec.get("perturbation", 0.05), spec.get("overshoot", 1.0), seed)
    if kind == "remote":
        return RemoteProposer(spec["endpoint"], spec.get("timeout", 120.0), spec.get("retries", 2))
    if kind == "replay":
        path = Path(spec["path"])
        if path.is_dir():
            path = path / f"{method}_seed{seed}.json"
        return ReplayProposer.from_record(json.loads(path.read_text()))
    raise ConfigError(f"unknown proposer kind {kind}")


def run_warmstart(cfg: CalibConfig, proposer, evaluator, bounds, budget: int, seed: int) -> RunRecord:
    """One line-searched proposer round from the seed-matched start, then uniform random search."""
    t0 = time.perf_counter()
    tracker = BudgetTracker(evaluator, budget)
    rng = P.make_rng(seed)
    theta0 = P.uniform_samples(rng, bounds, 1)[0]
    init = tracker(theta0, "init")
    rounds, history, events = [], [], []
    aborted, reason = False, None
    failures = 0
    while tracker.remaining > 0 and not rounds:
        try:
            proposer_round(tracker, proposer, cfg.line_search, bounds, history, rounds)
        except ProposerError as exc:
            failures += 1
            events.append(f"proposer failure {failures}: {exc}")
            if failures >= cfg.max_consecutive_failures:
                aborted, reason = True, "proposer_failure"
                break
    if not aborted:
        fill_uniform(tracker, rng, bounds)
    ls = cfg.line_search
    rec = RunRecord(
        method="warmstart", seed=int(seed), budget=int(budget),
        config={"beta": ls.beta, "max_steps": ls.max_steps, "proposer": proposer.name},
        initial_theta=theta0, initial_loss=float(init.loss),
        theta_best=tracker.best_theta.copy(), loss_best=tracker.best_loss,
        curve=list(tracker.curve), evaluations=tracker.evaluations, rounds=rounds,
        proposer_internal_evals=proposer.internal_evals, aborted=aborted, abort_reason=reason, events=events,
        timing={"total_s": time.perf_counter() - t0, "evaluation_s": tracker.eval_seconds},
    )
    rec.check()
    return rec


def run_method(method_spec: dict, ref: ReferenceSet, sim: SimConfig, budget: int, seed: int,
               bounds=None) -> RunRecord:
    """One (method, seed) run. Failures become an aborted record instead of an exception."""
    bounds = bounds or P.swimmer_bounds()
    name = method_spec["name"]
    evaluator = Evaluator(ref, sim)
    try:
        if name == "random":
            return run_random(bounds, evaluator, budget, seed)
        if name == "cmaes":
            cfg = CmaesConfig(method_spec.get("sigma0", 0.2), method_spec.get("popsize"))
            return run_cmaes(cfg, bounds, evaluator, budget, seed)
        if name == "bayesopt":
            cfg = BayesOptConfig(n_initial=method_spec.get("n_initial", 5), xi=method_spec.get("xi", 0.01))
            return run_bayesopt(cfg, bounds, evaluator, budget, seed)
        k = 1 if name == "swim2real_k1" else method_spec.get("max_steps", 3)
        cal = CalibConfig(LineSearchConfig(method_spec.get("beta", 0.5), k))
        proposer = make_proposer(method_spec["proposer"], ref, evaluator, bounds, seed, name)
        if name == "warmstart":
            rec = run_warmstart(cal, proposer, evaluator, bounds, budget, seed)
        else:
            rec = run_calibration(cal, proposer, evaluator, bounds, budget, seed, method=name)
        rec.config["proposer_spec"] = method_spec["proposer"]
        return rec
    except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
        log.exception("run %s seed %d failed", name, seed)
        theta0 = P.random_init(seed, bounds)
        return RunRecord(method=name, seed=int(seed), budget=int(budget), config=dict(method_spec),
                         initial_theta=theta0, initial_loss=math.inf, theta_best=theta0, loss_best=math.inf,
                         curve=[], evaluations=[], aborted=True, abort_reason=f"error: {exc}")


def _run_job(args):
    return run_method(*args)


def record_name(method: str, seed: int) -> str:
    return f"{method}_seed{seed}"


def run_experiment(exp: ExperimentConfig, ref: ReferenceSet | None = None):
    """Run every (method, seed), persist records, summary and figures. Returns (summary, records)."""
    t0 = time.perf_counter()
    started = datetime.now(timezone.utc).isoformat()
    out = Path(exp.output_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    sim = exp.sim_config()
    bounds = P.swimmer_bounds()
    if ref is None:
        ref = build_reference(exp, bounds)
    ref.check_schedule(sim)
    save_reference(ref, out / "reference")
    write_atomic(out / "config.json", dumps(exp.to_dict()))

    jobs = [(m, ref, sim, exp.budget, s, bounds) for m in exp.methods for s in exp.seeds]
    if exp.workers > 1:
        with ProcessPoolExecutor(exp.workers) as pool:
            records = list(pool.map(_run_job, jobs))
    else:
        records = [_run_job(j) for j in jobs]
    for rec in records:
        save_record(rec, out / "records" / (record_name(rec.method, rec.seed) + ".json"))

    summary = write_summary(out, records, ref, sim, exp.seeds, figures=exp.figures)
    sidecar = {"started_utc": started, "wall_clock_s": time.perf_counter() - t0,
               "host": platform.node(), "python": platform.python_version()}
    write_atomic(out / "run_info.json", json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return summary, records


def write_summary(out, records, ref, sim, expected_seeds=None, figures=True) -> dict:
    out = Path(out)
    finished = [r for r in records if not r.aborted]
    sweep = velocity_sweep(best_thetas(finished), ref, sim) if finished else {}
    summary = summarize(records, expected_seeds, sweep)
    write_atomic(out / "summary.json", dumps(summary))
    write_atomic(out / "summary.csv", summary_csv(summary))
    write_atomic(out / "velocity_sweep.csv", sweep_csv(sweep))
    if figures:
        from swimcal import plotting

        plotting.convergence_svg(records, out / "convergence.svg")
        plotting.convergence_png(records, out / "convergence.png")
        if sweep:
            plotting.velocity_png(sweep, out / "velocity_sweep.png")
    return summary


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "inf"
    return str(v)


def summary_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["best_mean", "best_std", "worst", "auc_mean", "auc_std", "velocity_mae_mm_s"]
    w.writerow(["method", "n_seeds", "missing_seeds"] + cols + ["mean_accept_rate"])
    for m, e in summary["methods"].items():
        acc = e.get("accept", {}).get("mean_accept_rate")
        w.writerow([m, len(e["seeds"]), " ".join(map(str, e["missing_seeds"]))]
                   + [_cell(e.get(c)) for c in cols] + [_cell(acc)])
    return buf.getvalue()


def sweep_csv(sweep: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "frequency_hz", "v_sim_m_s", "v_real_m_s", "abs_error_mm_s"])
    for m, s in sweep.items():
        for r in s["rows"]:
            w.writerow([m, _cell(r["frequency_hz"]), _cell(r["v_sim_m_s"]), _cell(r["v_real_m_s"]),
                        _cell(r["abs_error_mm_s"])])
    for m, s in sweep.items():
        w.writerow([m, "MAE", "", "", _cell(s["mae_mm_s"])])
        if s["n_diverged"]:
            w.writerow([f"# {m}: {s['n_diverged']} diverged frequencies excluded from MAE"])
    return buf.getvalue()


def load_records(directory) -> list:
    directory = Path(directory)
    rec_dir = directory / "records" if (directory / "records").is_dir() else directory
    paths = sorted(p for p in rec_dir.glob("*.json") if not p.name.endswith(".timing.json"))
    return [load_record(p) for p in paths]
