"""Planar articulated swimmer: a head link followed by five hinged tail links.

Generalized coordinates are ``q = (x, y, psi, q1..q5)`` where ``(x, y)`` is the
nose position, ``psi`` the heading of the head link's nose-to-tail axis, and
``q_j`` the relative hinge angles. The straight rest pose points the body along
world +x, so forward swimming moves the nose toward -x.

Fluid loading is a quasi-steady per-link model with five coefficient roles
(blunt drag, slender drag, angular drag, Kutta lift, Magnus lift). Integration
is semi-implicit Euler with the velocity-dependent forces (hinge damping and
fluid) linearized into the velocity update, which keeps heavily damped light
tail links stable at a 1 ms step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from swimcal import params as P

N_LINKS = 6
N_DOF = 8
N_MARKERS = 9
HALF_PI = 0.5 * math.pi


class SimulationDiverged(RuntimeError):
    def __init__(self, time: float, reason: str = "non-finite or over-bent state"):
        super().__init__(f"simulation diverged at t={time:.6g} s ({reason})")
        self.time = time


@dataclass(frozen=True)
class SwimmerModel:
    head_length: float = 0.20
    tail_length: float = 0.08
    head_mass: float = 1.0
    tail_mass: float = 0.1
    depth: float = 0.08
    tangential_area_ratio: float = 0.2
    rho: float = 1000.0
    kappa: float = 40.0
    tendon_signs: tuple = (1.0, 1.0, -1.0, -1.0, -1.0)

    def __post_init__(self):
        for name in ("head_length", "tail_length", "head_mass", "tail_mass", "depth", "rho", "kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if len(self.tendon_signs) != 5:
            raise ValueError("tendon_signs needs one entry per hinge")

    @property
    def lengths(self) -> np.ndarray:
        return np.array([self.head_length] + [self.tail_length] * 5)

    @property
    def masses(self) -> np.ndarray:
        return np.array([self.head_mass] + [self.tail_mass] * 5)

    @property
    def inertias(self) -> np.ndarray:
        # uniform rod about its centre
        return self.masses * self.lengths**2 / 12.0

    @property
    def normal_areas(self) -> np.ndarray:
        return self.lengths * self.depth

    @property
    def tangential_areas(self) -> np.ndarray:
        return self.tangential_area_ratio * self.normal_areas

    @property
    def body_length(self) -> float:
        return float(self.lengths.sum())

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def packed(self):
        return (
            self.lengths,
            self.masses,
            self.inertias,
            self.normal_areas,
            self.tangential_areas,
            float(self.rho),
            float(self.kappa),
            np.asarray(self.tendon_signs, dtype=float),
        )


DEFAULT_MODEL = SwimmerModel()


@dataclass(frozen=True)
class SimConfig:
    """Integration and sampling schedule shared by simulations and references."""

    duration: float = 5.0
    warmup: float = 1.0
    dt: float = 0.001
    sample_rate: float = 60.0
    model: SwimmerModel = field(default_factory=SwimmerModel)

    def __post_init__(self):
        if not (self.dt > 0 and self.sample_rate > 0):
            raise ValueError("dt and sample_rate must be positive")
        if not self.duration > self.warmup >= 0:
            raise ValueError("duration must exceed warmup")
        if self.dt > 1.0 / self.sample_rate:
            raise ValueError("dt must not exceed the sampling interval")

    @property
    def n_frames(self) -> int:
        # small epsilon guards floor against (5-1)*60 = 239.99999...
        return int(math.floor((self.duration - self.warmup) * self.sample_rate + 1e-9)) + 1

    @property
    def sample_times(self) -> np.ndarray:
        return self.warmup + np.arange(self.n_frames) / self.sample_rate

    def to_dict(self) -> dict:
        return {
            "duration": self.duration,
            "warmup": self.warmup,
            "dt": self.dt,
            "sample_rate": self.sample_rate,
        }


@dataclass
class MarkerTrajectory:
    """Sampled marker positions: ``positions`` has shape (frames, 9, 2)."""

    frequency: float
    sample_rate: float
    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 3 or self.positions.shape[1:] != (N_MARKERS, 2):
            raise ValueError(f"positions must be (frames, 9, 2), got {self.positions.shape}")
        if self.times.shape != (self.positions.shape[0],):
            raise ValueError("one timestamp per frame required")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("marker positions must be finite")

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    def head(self) -> np.ndarray:
        return self.positions[:, 0, :]


# ---------------------------------------------------------------------------
# actuation and fluid loading
# ---------------------------------------------------------------------------


def actuation_torques(t, f, arm_length, model: SwimmerModel = DEFAULT_MODEL, drive_sign=1.0):
    """Joint torques (N*m) of the crossed-tendon crank drive at time ``t``."""
    if f < 0:
        raise ValueError("frequency must be non-negative")
    signs = np.asarray(model.tendon_signs, dtype=float)
    return drive_sign * signs * model.kappa * arm_length * math.sin(2.0 * math.pi * f * t)


@njit(cache=True)
def _fluid(vt, vn, w, c, sn, st, length, rho, out, jac):
    """Link-frame fluid wrench (ft, fn, torque) and its velocity Jacobian."""
    half_rho = 0.5 * rho
    a_t = half_rho * c[1] * st
    a_n = half_rho * c[0] * sn
    a_w = half_rho * c[2] * sn * length * length
    kut = rho * c[3] * sn
    mag = rho * c[4] * sn * length

    ft = -a_t * abs(vt) * vt
    fn = -a_n * abs(vn) * vn
    tq = -a_w * abs(w) * w
    for i in range(3):
        for j in range(3):
            jac[i, j] = 0.0
    jac[0, 0] = -2.0 * a_t * abs(vt)
    jac[1, 1] = -2.0 * a_n * abs(vn)
    jac[2, 2] = -2.0 * a_w * abs(w)

    # Kutta lift: |1/2 rho c S v^2 sin(2 alpha)| normal to the velocity
    s2 = vt * vt + vn * vn
    if s2 > 0.0 and kut != 0.0:
        s = math.sqrt(s2)
        s3 = s2 * s
        ft += kut * vt * vn * vn / s
        fn -= kut * vt * vt * vn / s
        jac[0, 0] += kut * vn**4 / s3
        jac[0, 1] += kut * vt * vn * (2.0 * s2 - vn * vn) / s3
        jac[1, 0] -= kut * vt * vn * (2.0 * s2 - vt * vt) / s3
        jac[1, 1] -= kut * vt**4 / s3

    # Magnus lift: rotation times the velocity turned by +90 degrees
    ft -= mag * w * vn
    fn += mag * w * vt
    jac[0, 1] -= mag * w
    jac[0, 2] -= mag * vn
    jac[1, 0] += mag * w
    jac[1, 2] += mag * vt

    out[0] = ft
    out[1] = fn
    out[2] = tq


def fluid_wrench(vt, vn, w, coeffs, normal_area, tangential_area, length, rho=1000.0):
    """Quasi-steady fluid force (link frame, N) and torque (N*m) on one link.

    ``vt``/``vn`` are the link's centre velocity along/normal to its axis and
    ``w`` its angular rate. ``coeffs`` = (blunt, slender, angular, kutta, magnus).
    """
    out = np.zeros(3)
    jac = np.zeros((3, 3))
    _fluid(float(vt), float(vn), float(w), np.asarray(coeffs, dtype=float),
           float(normal_area), float(tangential_area), float(length), float(rho), out, jac)
    return out[:2].copy(), float(out[2])


# ---------------------------------------------------------------------------
# chain kinematics and dynamics (numba kernels)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _link_angles(q, phi):
    phi[0] = q[2]
    for i in range(1, 6):
        phi[i] = phi[i - 1] + q[2 + i]


@njit(cache=True)
def _point_jacobian(i, r, phi, lengths, J):
    """2x8 Jacobian of the point at distance r along link i."""
    for a in range(2):
        for b in range(8):
            J[a, b] = 0.0
    J[0, 0] = 1.0
    J[1, 1] = 1.0
    # d/dphi_k contributes to psi (col 2) and to every hinge j <= k (col 2 + j)
    for k in range(i + 1):
        rk = r if k == i else lengths[k]
        px = -rk * math.sin(phi[k])
        py = rk * math.cos(phi[k])
        for col in range(2, 3 + k):
            J[0, col] += px
            J[1, col] += py


@njit(cache=True)
def _solve(A, b, x):
    """Gaussian elimination with partial pivoting; A and b are overwritten.

    Returns False on a (numerically) singular system.
    """
    n = b.shape[0]
    for k in range(n):
        p = k
        best = abs(A[k, k])
        for i in range(k + 1, n):
            if abs(A[i, k]) > best:
                best = abs(A[i, k])
                p = i
        if not best > 1e-300:
            return False
        if p != k:
            for j in range(n):
                tmp = A[k, j]
                A[k, j] = A[p, j]
                A[p, j] = tmp
            tmp = b[k]
            b[k] = b[p]
            b[p] = tmp
        for i in range(k + 1, n):
            fac = A[i, k] / A[k, k]
            if fac != 0.0:
                for j in range(k, n):
                    A[i, j] -= fac * A[k, j]
                b[i] -= fac * b[k]
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for j in range(i + 1, n):
            acc -= A[i, j] * x[j]
        x[i] = acc / A[i, i]
    return True


@njit(cache=True)
def _assemble(q, qd, theta, tau_act, lengths, masses, inertias, sn, st, rho, M, Q, D):
    """Mass matrix M, generalized force Q (incl. velocity-product terms) and dQ/dqd."""
    phi = np.empty(6)
    phid = np.empty(6)
    _link_angles(q, phi)
    phid[0] = qd[2]
    for i in range(1, 6):
        phid[i] = phid[i - 1] + qd[2 + i]
    c = theta[0:5]
    J = np.empty((2, 8))
    jw = np.zeros(8)
    Jl = np.empty((3, 8))
    wrench = np.empty(3)
    dw = np.empty((3, 3))
    for a in range(8):
        Q[a] = 0.0
        for b in range(8):
            M[a, b] = 0.0
            D[a, b] = 0.0

    for i in range(6):
        half = 0.5 * lengths[i]
        _point_jacobian(i, half, phi, lengths, J)
        for a in range(8):
            jw[a] = 1.0 if (a == 2 or (a >= 3 and a - 2 <= i)) else 0.0
        m = masses[i]
        inertia = inertias[i]
        for a in range(8):
            for b in range(8):
                M[a, b] += m * (J[0, a] * J[0, b] + J[1, a] * J[1, b]) + inertia * jw[a] * jw[b]

        # centripetal acceleration of the link centre
        bx = 0.0
        by = 0.0
        for k in range(i + 1):
            rk = half if k == i else lengths[k]
            bx -= rk * phid[k] * phid[k] * math.cos(phi[k])
            by -= rk * phid[k] * phid[k] * math.sin(phi[k])
        for a in range(8):
            Q[a] -= m * (J[0, a] * bx + J[1, a] * by)

        vx = 0.0
        vy = 0.0
        for a in range(8):
            vx += J[0, a] * qd[a]
            vy += J[1, a] * qd[a]
        ca = math.cos(phi[i])
        sa = math.sin(phi[i])
        vt = vx * ca + vy * sa
        vn = -vx * sa + vy * ca
        _fluid(vt, vn, phid[i], c, sn[i], st[i], lengths[i], rho, wrench, dw)
        fx = wrench[0] * ca - wrench[1] * sa
        fy = wrench[0] * sa + wrench[1] * ca
        for a in range(8):
            Q[a] += J[0, a] * fx + J[1, a] * fy + jw[a] * wrench[2]
            Jl[0, a] = J[0, a] * ca + J[1, a] * sa
            Jl[1, a] = -J[0, a] * sa + J[1, a] * ca
            Jl[2, a] = jw[a]
        for a in range(8):
            for r in range(3):
                if Jl[r, a] == 0.0:
                    continue
                for s in range(3):
                    g = Jl[r, a] * dw[r, s]
                    if g == 0.0:
                        continue
                    for b in range(8):
                        D[a, b] += g * Jl[s, b]

    stiff = theta[6:11]
    damp = theta[11:16]
    for j in range(5):
        Q[3 + j] += tau_act[j] - stiff[j] * q[3 + j] - damp[j] * qd[3 + j]
        D[3 + j, 3 + j] -= damp[j]


@njit(cache=True)
def _cholesky_ok(M):
    n = M.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            acc = M[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            if i == j:
                if not acc > 0.0:
                    return False
                L[i, i] = math.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    return True


@njit(cache=True)
def _forward_dynamics(q, qd, theta, tau_act, lengths, masses, inertias, sn, st, rho, qdd):
    M = np.empty((8, 8))
    Q = np.empty(8)
    D = np.empty((8, 8))
    _assemble(q, qd, theta, tau_act, lengths, masses, inertias, sn, st, rho, M, Q, D)
    if not _cholesky_ok(M):
        return False
    return _solve(M, Q, qdd)


@njit(cache=True, nogil=True)
def _integrate(theta, freq, drive_sign, n_steps, dt, q0, qd0,
               lengths, masses, inertias, sn, st, rho, kappa, signs, hist, vhist):
    """Run n_steps; store q (and qd) after each step. Returns the failing step or -1."""
    q = q0.copy()
    qd = qd0.copy()
    M = np.empty((8, 8))
    Q = np.empty(8)
    D = np.empty((8, 8))
    dqd = np.empty(8)
    tau = np.empty(5)
    amp = drive_sign * kappa * theta[5]
    two_pi_f = 2.0 * math.pi * freq
    for a in range(8):
        hist[0, a] = q[a]
        vhist[0, a] = qd[a]
    for n in range(n_steps):
        drive = amp * math.sin(two_pi_f * (n * dt))
        for j in range(5):
            tau[j] = signs[j] * drive
        _assemble(q, qd, theta, tau, lengths, masses, inertias, sn, st, rho, M, Q, D)
        for a in range(8):
            Q[a] *= dt
            for b in range(8):
                M[a, b] -= dt * D[a, b]
        if not _solve(M, Q, dqd):
            return n
        for a in range(8):
            qd[a] += dqd[a]
            q[a] += dt * qd[a]
            hist[n + 1, a] = q[a]
            vhist[n + 1, a] = qd[a]
        for a in range(8):
            if not math.isfinite(q[a]) or not math.isfinite(qd[a]):
                return n
        for j in range(5):
            if abs(q[3 + j]) >= HALF_PI:
                return n
    return -1


def forward_dynamics(q, qd, tau_act, theta, model: SwimmerModel = DEFAULT_MODEL) -> np.ndarray:
    """Generalized accelerations from M(q) qdd = actuation + spring + damping + fluid forces."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise SimulationDiverged(float("nan"), "non-finite state")
    lengths, masses, inertias, sn, st, rho, _, _ = model.packed()
    qdd = np.empty(8)
    ok = _forward_dynamics(q, qd, np.asarray(theta, dtype=float), np.asarray(tau_act, dtype=float),
                           lengths, masses, inertias, sn, st, rho, qdd)
    if not ok or not np.all(np.isfinite(qdd)):
        raise SimulationDiverged(float("nan"), "mass matrix not positive definite")
    return qdd


def mass_matrix(q, model: SwimmerModel = DEFAULT_MODEL) -> np.ndarray:
    lengths, masses, inertias, sn, st, rho, _, _ = model.packed()
    M = np.empty((8, 8))
    Q = np.empty(8)
    D = np.empty((8, 8))
    _assemble(np.asarray(q, dtype=float), np.zeros(8), np.zeros(16), np.zeros(5),
              lengths, masses, inertias, sn, st, rho, M, Q, D)
    return M


def mechanical_energy(q, qd, theta, model: SwimmerModel = DEFAULT_MODEL) -> float:
    """Kinetic energy plus hinge spring potential (J)."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    stiff = np.asarray(theta, dtype=float)[P.STIFFNESS]
    return float(0.5 * qd @ mass_matrix(q, model) @ qd + 0.5 * np.sum(stiff * q[3:] ** 2))


# ---------------------------------------------------------------------------
# kinematics, integration driver and output
# ---------------------------------------------------------------------------


def marker_positions(q, model: SwimmerModel = DEFAULT_MODEL) -> np.ndarray:
    """Forward kinematics of the 9 markers for one or many configurations.

    ``q`` is (8,) or (frames, 8); returns (9, 2) or (frames, 9, 2).
    """
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    lengths = model.lengths
    phi = q[:, 2:3] + np.concatenate([np.zeros((q.shape[0], 1)), np.cumsum(q[:, 3:], axis=1)], axis=1)
    ex, ey = np.cos(phi), np.sin(phi)
    nose = q[:, :2]
    out = np.empty((q.shape[0], N_MARKERS, 2))
    out[:, 0] = nose
    for m, frac in ((1, 1.0 / 3.0), (2, 2.0 / 3.0)):
        out[:, m, 0] = nose[:, 0] + frac * lengths[0] * ex[:, 0]
        out[:, m, 1] = nose[:, 1] + frac * lengths[0] * ey[:, 0]
    joint = nose.copy()
    for i in range(N_LINKS):
        joint = joint + lengths[i] * np.stack([ex[:, i], ey[:, i]], axis=1)
        out[:, 3 + i] = joint
    return out[0] if single else out


def integrate(theta, f, cfg: SimConfig, drive_sign=1.0, q0=None, qd0=None):
    """Raw integration: returns (times, q history, qd history) at every step.

    Raises SimulationDiverged with the time of failure.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (P.N_PARAMS,) or not np.all(np.isfinite(theta)):
        raise ValueError("theta must be a finite 16-vector")
    n_steps = int(math.ceil(cfg.duration / cfg.dt - 1e-9))
    q0 = np.zeros(8) if q0 is None else np.asarray(q0, dtype=float)
    qd0 = np.zeros(8) if qd0 is None else np.asarray(qd0, dtype=float)
    hist = np.empty((n_steps + 1, 8))
    vhist = np.empty((n_steps + 1, 8))
    lengths, masses, inertias, sn, st, rho, kappa, signs = cfg.model.packed()
    fail = _integrate(theta, float(f), float(drive_sign), n_steps, float(cfg.dt), q0, qd0,
                      lengths, masses, inertias, sn, st, rho, kappa, signs, hist, vhist)
    if fail >= 0:
        raise SimulationDiverged((fail + 1) * cfg.dt)
    return np.arange(n_steps + 1) * cfg.dt, hist, vhist


def simulate(theta, f, cfg: SimConfig = SimConfig(), drive_sign=1.0) -> MarkerTrajectory:
    """Simulate from the straight rest pose and sample markers after the warmup.

    Sample instants that fall between integration steps are linearly
    interpolated in generalized coordinates before forward kinematics.
    """
    if f < 0:
        raise ValueError("frequency must be non-negative")
    _, hist, _ = integrate(theta, f, cfg, drive_sign)
    times = cfg.sample_times
    pos = times / cfg.dt
    lo = np.minimum(np.floor(pos + 1e-9).astype(int), hist.shape[0] - 1)
    hi = np.minimum(lo + 1, hist.shape[0] - 1)
    w = np.clip(pos - lo, 0.0, 1.0)[:, None]
    w[np.abs(w) < 1e-9] = 0.0
    qs = (1.0 - w) * hist[lo] + w * hist[hi]
    return MarkerTrajectory(float(f), cfg.sample_rate, times, marker_positions(qs, cfg.model))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

CSV_HEADER = ["t"] + [f"m{i}{ax}" for i in range(N_MARKERS) for ax in "xy"]


def trajectory_filename(f: float) -> str:
    return f"freq_{f:g}Hz.csv"


def write_trajectory_csv(traj: MarkerTrajectory, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        flat = traj.positions.reshape(traj.n_frames, -1)
        for t, row in zip(traj.times, flat):
            w.writerow([f"{t:.9g}"] + [f"{v:.9g}" for v in row])
    tmp.replace(path)


def read_trajectory_csv(path, frequency: float, sample_rate: float) -> MarkerTrajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header[:4]}...")
        rows = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
    if rows.size == 0:
        raise ValueError(f"{path}: no frames")
    return MarkerTrajectory(frequency, sample_rate, rows[:, 0], rows[:, 1:].reshape(-1, N_MARKERS, 2))
