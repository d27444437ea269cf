"""Marker-trajectory calibration objective, reference sets and velocity metrics."""

from __future__ import annotations

import json
import logging
import math
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from swimcal import params as P
from swimcal.swimsim import (
    MarkerTrajectory,
    SimConfig,
    SimulationDiverged,
    read_trajectory_csv,
    simulate,
    trajectory_filename,
    write_trajectory_csv,
)

log = logging.getLogger(__name__)

FREQUENCIES = tuple(0.5 + 0.25 * i for i in range(8))


@dataclass
class EvalResult:
    """Outcome of one evaluation (all frequencies of the reference set).

    ``errors[f, m]`` is the time-averaged L2 error of marker m at frequency f;
    rows of diverged frequencies are +inf and their velocity is NaN.
    """

    loss: float
    errors: np.ndarray = field(default_factory=lambda: np.zeros((0, 9)))
    sim_velocity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    real_velocity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    frequencies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    diverged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    cost: int = 0

    @property
    def any_diverged(self) -> bool:
        return bool(np.any(self.diverged))

    def worst_frequency(self):
        if self.errors.size == 0:
            return None
        per_freq = self.errors.mean(axis=1)
        return float(self.frequencies[int(np.argmax(per_freq))])


@dataclass
class ReferenceSet:
    frequencies: np.ndarray
    trajectories: list
    velocities: np.ndarray
    provenance: dict

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        if len(self.trajectories) != len(self.frequencies):
            raise ValueError("one trajectory per frequency required")
        if len(self.frequencies) == 0 or np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("frequencies must be non-empty and strictly increasing")
        counts = {t.n_frames for t in self.trajectories}
        if len(counts) != 1:
            raise ValueError("all reference trajectories must have the same frame count")

    @property
    def sample_rate(self) -> float:
        return self.trajectories[0].sample_rate

    def check_schedule(self, cfg: SimConfig) -> None:
        times = cfg.sample_times
        for traj in self.trajectories:
            if traj.n_frames != times.size or not np.allclose(traj.times, times, atol=1e-6):
                raise ValueError(
                    f"reference at {traj.frequency:g} Hz has {traj.n_frames} frames; "
                    f"simulator schedule has {times.size}"
                )


class EvalCounter:
    """Thread-safe evaluation counter."""

    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def increment(self, by: int = 1) -> None:
        with self._lock:
            self._n += by

    @property
    def value(self) -> int:
        return self._n


# ---------------------------------------------------------------------------
# alignment and errors
# ---------------------------------------------------------------------------


def local_frame(traj: MarkerTrajectory) -> MarkerTrajectory:
    """Put M0 at the origin and the M0->M1 direction on +x, frame by frame."""
    pos = traj.positions
    rel = pos - pos[:, :1, :]
    dx = rel[:, 1, 0][:, None]
    dy = rel[:, 1, 1][:, None]
    n = np.hypot(dx, dy)
    if np.any(n == 0):
        bad = int(np.flatnonzero(n[:, 0] == 0)[0])
        raise ValueError(f"M0 and M1 coincide in frame {bad}; heading undefined")
    x = rel[:, :, 0]
    y = rel[:, :, 1]
    out = np.empty_like(pos)
    # written so that M1 maps to y == 0 exactly
    out[:, :, 0] = (dx * x + dy * y) / n
    out[:, :, 1] = (dx * y - dy * x) / n
    return MarkerTrajectory(traj.frequency, traj.sample_rate, traj.times.copy(), out)


def marker_error(sim: MarkerTrajectory, real: MarkerTrajectory):
    """Per-marker time-averaged L2 distance and their mean (inputs already aligned)."""
    if sim.n_frames != real.n_frames:
        raise ValueError(f"frame count mismatch: sim {sim.n_frames} vs real {real.n_frames}")
    if not np.allclose(sim.times, real.times, rtol=0, atol=1e-6):
        raise ValueError("timestamps of simulated and reference trajectories differ")
    per_marker = np.linalg.norm(sim.positions - real.positions, axis=2).mean(axis=0)
    return per_marker, float(per_marker.mean())


def forward_velocity(traj: MarkerTrajectory) -> float:
    """Least-squares slope (m/s) of the head marker along its net displacement."""
    if traj.n_frames < 2:
        raise ValueError("need at least two frames")
    head = traj.head()
    disp = head[-1] - head[0]
    norm = math.hypot(disp[0], disp[1])
    if norm == 0.0:
        return 0.0
    proj = head @ (disp / norm)
    t = traj.times - traj.times.mean()
    return float(np.dot(t, proj - proj.mean()) / np.dot(t, t))


def mean_abs_velocity_error(sim_v, real_v) -> float:
    """Mean |v_sim - v_real| in mm/s (inputs in m/s); +inf if any entry is not finite."""
    sim_v = np.asarray(sim_v, dtype=float)
    real_v = np.asarray(real_v, dtype=float)
    diff = np.abs(sim_v - real_v)
    if not np.all(np.isfinite(diff)):
        return math.inf
    return float(diff.mean() * 1000.0)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _simulate_one(theta, f, cfg):
    try:
        return simulate(theta, f, cfg)
    except SimulationDiverged as exc:
        log.debug("divergence at f=%g: %s", f, exc)
        return None


def evaluate(theta, ref: ReferenceSet, cfg: SimConfig, counter: EvalCounter | None = None,
             workers: int = 1, _sim_cache=None) -> EvalResult:
    """Run every reference frequency and score the aligned marker error.

    Divergence at any frequency yields ``loss = inf`` rather than an exception.
    """
    theta = np.asarray(theta, dtype=float)
    freqs = ref.frequencies
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            trajs = list(ex.map(lambda f: _cached_sim(theta, f, cfg, _sim_cache), freqs))
    else:
        trajs = [_cached_sim(theta, f, cfg, _sim_cache) for f in freqs]
    if counter is not None:
        counter.increment()

    n_f = len(freqs)
    errors = np.full((n_f, 9), np.inf)
    sim_v = np.full(n_f, np.nan)
    diverged = np.zeros(n_f, dtype=bool)
    for i, (sim, real) in enumerate(zip(trajs, ref.trajectories)):
        if sim is None:
            diverged[i] = True
            continue
        errors[i], _ = marker_error(local_frame(sim), local_frame(real))
        sim_v[i] = forward_velocity(sim)
    loss = math.inf if diverged.any() else float(errors.mean(axis=1).mean())
    return EvalResult(loss, errors, sim_v, ref.velocities.copy(), freqs.copy(), diverged, cost=n_f)


def _cached_sim(theta, f, cfg, cache):
    if cache is None:
        return _simulate_one(theta, f, cfg)
    key = (theta.tobytes(), float(f))
    hit = cache.get(key)
    if hit is not None:
        return hit[0]
    traj = _simulate_one(theta, f, cfg)
    cache.put(key, (traj,))
    return traj


class _LRU:
    def __init__(self, size):
        self.size = size
        self._d = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            if key in self._d:
                self._d.move_to_end(key)
                return self._d[key]
        return None

    def put(self, key, value):
        with self._lock:
            self._d[key] = value
            self._d.move_to_end(key)
            while len(self._d) > self.size:
                self._d.popitem(last=False)


class Evaluator:
    """Callable objective bound to a reference set, with its own evaluation counter.

    Simulations are memoized by exact parameter bytes; repeated points are
    still charged as evaluations.
    """

    def __init__(self, ref: ReferenceSet, cfg: SimConfig = SimConfig(), workers: int = 1,
                 cache_size: int = 256, _cache=None):
        ref.check_schedule(cfg)
        self.ref = ref
        self.cfg = cfg
        self.workers = workers
        self.counter = EvalCounter()
        self._cache = _cache if _cache is not None else (_LRU(cache_size * len(ref.frequencies)) if cache_size else None)

    @property
    def count(self) -> int:
        return self.counter.value

    def __call__(self, theta) -> EvalResult:
        return evaluate(theta, self.ref, self.cfg, self.counter, self.workers, self._cache)

    def fork(self) -> "Evaluator":
        """Same objective and cache, separate counter."""
        return Evaluator(self.ref, self.cfg, self.workers, _cache=self._cache)


class FunctionEvaluator:
    """Wraps a plain ``f(x) -> float`` so optimizers can run on toy problems."""

    def __init__(self, fn):
        self.fn = fn
        self.counter = EvalCounter()

    @property
    def count(self) -> int:
        return self.counter.value

    def __call__(self, theta) -> EvalResult:
        self.counter.increment()
        return EvalResult(float(self.fn(np.asarray(theta, dtype=float))), cost=1)

    def fork(self) -> "FunctionEvaluator":
        return FunctionEvaluator(self.fn)


def velocity_mae(theta, ref: ReferenceSet, cfg: SimConfig = SimConfig()) -> float:
    """Mean over frequencies of |v_sim - v_real|, in mm/s; inf on divergence."""
    res = evaluate(theta, ref, cfg)
    if res.any_diverged:
        return math.inf
    return mean_abs_velocity_error(res.sim_velocity, ref.velocities)


# ---------------------------------------------------------------------------
# reference sets
# ---------------------------------------------------------------------------


def synthetic_reference(theta_star, cfg: SimConfig = SimConfig(), frequencies=FREQUENCIES,
                        noise_sigma: float = 0.0, noise_seed: int = 0, extra_provenance=None) -> ReferenceSet:
    """Simulate references from a known parameter vector, optionally with Gaussian marker noise."""
    theta_star = np.asarray(theta_star, dtype=float)
    rng = P.make_rng([int(noise_seed), 7919])
    trajs = []
    for f in frequencies:
        traj = simulate(theta_star, f, cfg)
        if noise_sigma > 0:
            traj = MarkerTrajectory(traj.frequency, traj.sample_rate, traj.times,
                                    traj.positions + rng.normal(0.0, noise_sigma, traj.positions.shape))
        trajs.append(traj)
    prov = {
        "kind": "synthetic",
        "theta_star": theta_star.tolist(),
        "noise_sigma_m": float(noise_sigma),
        "noise_seed": int(noise_seed),
    }
    prov.update(extra_provenance or {})
    return ReferenceSet(list(frequencies), trajs, [forward_velocity(t) for t in trajs], prov)


def draw_theta_star(seed: int, bounds: P.ParamBounds, cfg: SimConfig = SimConfig(),
                    frequencies=FREQUENCIES, max_draws: int = 100):
    """Uniform draws until one simulates without divergence at every frequency."""
    rng = P.make_rng([int(seed), 104729])
    for attempt in range(max_draws):
        theta = P.uniform_samples(rng, bounds, 1)[0]
        try:
            for f in frequencies:
                simulate(theta, f, cfg)
        except SimulationDiverged:
            continue
        return theta, attempt + 1
    raise RuntimeError(f"no non-divergent parameter vector in {max_draws} draws")


def save_reference(ref: ReferenceSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for traj in ref.trajectories:
        write_trajectory_csv(traj, directory / trajectory_filename(traj.frequency))
    meta = {
        "sample_rate_hz": ref.sample_rate,
        "frequencies": ref.frequencies.tolist(),
        "velocities_m_s": ref.velocities.tolist(),
        "provenance": ref.provenance,
    }
    tmp = directory / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    tmp.replace(directory / "meta.json")


def load_reference(directory, cfg: SimConfig = SimConfig()) -> ReferenceSet:
    """Read ``freq_<f>Hz.csv`` files plus ``meta.json`` and resample onto the simulator grid.

    Resampling is linear in time per coordinate; reference timestamps must cover
    the simulator's sample instants. Forward velocities are recomputed from the
    resampled trajectories unless meta.json supplies ``velocities_m_s``.
    """
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    freqs = [float(f) for f in meta["frequencies"]]
    rate = float(meta["sample_rate_hz"])
    grid = cfg.sample_times
    trajs = []
    for f in freqs:
        raw = read_trajectory_csv(directory / trajectory_filename(f), f, rate)
        if raw.times[0] > grid[0] + 1e-6 or raw.times[-1] < grid[-1] - 1e-6:
            raise ValueError(
                f"reference at {f:g} Hz spans [{raw.times[0]:g}, {raw.times[-1]:g}] s, "
                f"which does not cover the simulator window [{grid[0]:g}, {grid[-1]:g}] s"
            )
        if raw.n_frames == grid.size and np.allclose(raw.times, grid, atol=1e-6):
            pos = raw.positions
        else:
            flat = raw.positions.reshape(raw.n_frames, -1)
            pos = np.stack([np.interp(grid, raw.times, flat[:, k]) for k in range(flat.shape[1])], axis=1)
            pos = pos.reshape(grid.size, 9, 2)
        trajs.append(MarkerTrajectory(f, cfg.sample_rate, grid.copy(), pos))
    if "velocities_m_s" in meta:
        vel = [float(v) for v in meta["velocities_m_s"]]
    else:
        vel = [forward_velocity(t) for t in trajs]
    prov = dict(meta.get("provenance", {}))
    prov.setdefault("kind", "ingested")
    return ReferenceSet(freqs, trajs, vel, prov)
