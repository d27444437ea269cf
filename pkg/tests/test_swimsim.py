import math

import numpy as np
import pytest

from swimcal import params as P
from swimcal.swimsim import (
    DEFAULT_MODEL,
    MarkerTrajectory,
    SimConfig,
    SimulationDiverged,
    actuation_torques,
    fluid_wrench,
    forward_dynamics,
    integrate,
    marker_positions,
    mass_matrix,
    mechanical_energy,
    read_trajectory_csv,
    simulate,
    trajectory_filename,
    write_trajectory_csv,
)


def test_model_constants():
    m = DEFAULT_MODEL
    assert m.body_length == pytest.approx(0.6)
    assert m.total_mass == pytest.approx(1.5)
    np.testing.assert_allclose(m.normal_areas, m.lengths * 0.08)
    np.testing.assert_allclose(m.tangential_areas, 0.2 * m.normal_areas)
    np.testing.assert_allclose(m.inertias, m.masses * m.lengths**2 / 12.0)


def test_torques():
    assert np.all(actuation_torques(0.37, 0.0, 0.05) == 0.0)
    f = 1.3
    tau = actuation_torques(1.0 / (4 * f), f, 0.06)
    assert tau[0] == pytest.approx(2.4)
    assert tau[4] == pytest.approx(-2.4)
    np.testing.assert_allclose(np.sign(tau), [1, 1, -1, -1, -1])
    for t in (0.1, 0.25, 0.9):
        np.testing.assert_allclose(actuation_torques(t, f, 0.04), 2 * actuation_torques(t, f, 0.02), rtol=1e-15)
        np.testing.assert_allclose(actuation_torques(t + 1 / f, f, 0.04), actuation_torques(t, f, 0.04), atol=1e-12)


SN, ST, L = 0.0064, 0.00128, 0.08


def test_fluid_hand_values():
    force, torque = fluid_wrench(0.0, 1.0, 0.0, [2, 0, 0, 0, 0], SN, ST, L)
    assert force[1] == pytest.approx(-6.4)
    assert force[0] == 0.0 and torque == 0.0
    force, _ = fluid_wrench(-0.5, 0.0, 0.0, [0, 3, 0, 0, 0], SN, ST, L)
    assert force[0] == pytest.approx(0.5 * 1000 * 3 * ST * 0.25)
    _, torque = fluid_wrench(0.0, 0.0, 2.0, [0, 0, 1.5, 0, 0], SN, ST, L)
    assert torque == pytest.approx(-0.5 * 1000 * 1.5 * SN * L**2 * 4.0)


def test_fluid_quiescent_and_zero_coeffs(rng):
    f, t = fluid_wrench(0, 0, 0, [5, 5, 5, 5, 5], SN, ST, L)
    assert np.all(f == 0) and t == 0
    for _ in range(20):
        vt, vn, w = rng.normal(size=3)
        f, t = fluid_wrench(vt, vn, w, np.zeros(5), SN, ST, L)
        assert np.all(f == 0) and t == 0


def test_kutta_lift_perpendicular_with_expected_magnitude(rng):
    c = 2.5
    for _ in range(20):
        vt, vn = rng.normal(size=2)
        f, _ = fluid_wrench(vt, vn, 0.0, [0, 0, 0, c, 0], SN, ST, L)
        speed2 = vt * vt + vn * vn
        alpha = math.atan2(vn, vt)
        assert f @ [vt, vn] == pytest.approx(0.0, abs=1e-12)
        assert np.hypot(*f) == pytest.approx(0.5 * 1000 * c * SN * speed2 * abs(math.sin(2 * alpha)), rel=1e-12)


def test_magnus_force():
    vt, vn, w, c = 0.3, -0.2, 1.7, 0.8
    f, t = fluid_wrench(vt, vn, w, [0, 0, 0, 0, c], SN, ST, L)
    np.testing.assert_allclose(f, 1000 * c * SN * L * w * np.array([-vn, vt]), rtol=1e-12)
    assert t == 0.0


def test_fluid_linear_in_each_coefficient(rng):
    for _ in range(20):
        vt, vn, w = rng.normal(size=3)
        base = rng.uniform(0, 10, 5)
        f0, t0 = fluid_wrench(vt, vn, w, base, SN, ST, L)
        for k in range(5):
            e = np.zeros(5)
            e[k] = 1.0
            f1, t1 = fluid_wrench(vt, vn, w, base + 2 * e, SN, ST, L)
            f2, t2 = fluid_wrench(vt, vn, w, base + 4 * e, SN, ST, L)
            np.testing.assert_allclose(f2 - f0, 2 * (f1 - f0), rtol=1e-9, atol=1e-12)
            assert t2 - t0 == pytest.approx(2 * (t1 - t0), rel=1e-9, abs=1e-12)


def test_rest_is_equilibrium(theta_mid):
    qdd = forward_dynamics(np.zeros(8), np.zeros(8), np.zeros(5), theta_mid)
    np.testing.assert_allclose(qdd, 0.0, atol=1e-14)


def _kinetic_energy_oracle(q, qd, eps=1e-6):
    """Sum of link kinetic energies from finite-differenced marker kinematics."""
    def links(qq):
        p = marker_positions(qq)
        ends = [p[0]] + [p[k] for k in range(3, 9)]
        centres = np.array([(ends[i] + ends[i + 1]) / 2 for i in range(6)])
        angles = np.array([math.atan2(*(ends[i + 1] - ends[i])[::-1]) for i in range(6)])
        return centres, angles

    cp, ap = links(q + eps * qd)
    cm, am = links(q - eps * qd)
    v = (cp - cm) / (2 * eps)
    w = (ap - am) / (2 * eps)
    m = DEFAULT_MODEL
    return 0.5 * np.sum(m.masses * np.sum(v * v, axis=1)) + 0.5 * np.sum(m.inertias * w * w)


def test_mass_matrix_spd_and_matches_kinetic_energy(rng):
    for _ in range(100):
        q = rng.uniform(-1, 1, 8) * [1, 1, math.pi, 1.2, 1.2, 1.2, 1.2, 1.2]
        M = mass_matrix(q)
        assert np.max(np.abs(M - M.T)) <= 1e-10
        assert np.all(np.linalg.eigvalsh(M) > 0)
    for _ in range(10):
        q = rng.uniform(-1, 1, 8)
        qd = rng.normal(size=8)
        assert 0.5 * qd @ mass_matrix(q) @ qd == pytest.approx(_kinetic_energy_oracle(q, qd), rel=1e-8)


def test_acceleration_matches_finite_difference(theta_mid, rng):
    q0 = np.array([0, 0, 0, 0.2, -0.1, 0.15, 0.1, -0.2])
    qd0 = rng.normal(size=8) * 0.3
    a = forward_dynamics(q0, qd0, np.zeros(5), theta_mid)
    errs = []
    for dt in (1e-7, 1e-8):
        cfg = SimConfig(duration=2 * dt, warmup=0.0, dt=dt, sample_rate=1.0)
        _, _, v = integrate(theta_mid, 0.0, cfg, q0=q0, qd0=qd0)
        errs.append(np.max(np.abs((v[1] - v[0]) / dt - a)))
    # first-order consistency: the error shrinks with dt
    assert errs[1] < 0.2 * errs[0]
    assert errs[1] < 1e-3 * np.max(np.abs(a))


def test_energy_drift_vanishes_without_dissipation(theta_mid):
    theta = theta_mid.copy()
    theta[P.FLUID] = 0.0
    theta[P.DAMPING] = 0.0
    q0 = np.array([0, 0, 0, 0.2, -0.1, 0.15, 0.1, -0.2])
    qd0 = np.zeros(8)
    qd0[3] = 1.0
    drift = []
    for dt in (1e-4, 1e-5):
        cfg = SimConfig(duration=0.2, warmup=0.0, dt=dt, sample_rate=10.0)
        _, h, v = integrate(theta, 0.0, cfg, q0=q0, qd0=qd0)
        idx = range(0, len(h), max(1, len(h) // 200))
        e = np.array([mechanical_energy(h[i], v[i], theta) for i in idx])
        drift.append(e.max() - e.min())
    assert drift[1] < 0.15 * drift[0]
    assert drift[1] < 0.01 * mechanical_energy(q0, qd0, theta)


def test_energy_non_increasing_with_damping(theta_mid):
    q0 = np.array([0, 0, 0, 0.3, -0.2, 0.25, 0.1, -0.3])
    qd0 = np.zeros(8)
    qd0[4] = 2.0
    cfg = SimConfig(duration=2.0, warmup=0.0)
    t, h, v = integrate(theta_mid, 0.0, cfg, q0=q0, qd0=qd0)
    e = np.array([mechanical_energy(h[i], v[i], theta_mid) for i in range(len(t))])
    after = t >= 0.1
    assert np.max(np.diff(e[after])) <= 1e-9


def test_settles_at_rest_with_zero_frequency(theta_mid, short_cfg):
    tr = simulate(theta_mid, 0.0, short_cfg)
    assert np.max(np.abs(np.diff(tr.positions, axis=0))) <= 1e-6


def test_frame_count_and_times():
    cfg = SimConfig()
    assert cfg.n_frames == 241
    cfg2 = SimConfig(duration=2.0, warmup=0.3, sample_rate=60.0)
    assert cfg2.n_frames == math.floor(1.7 * 60) + 1
    np.testing.assert_allclose(np.diff(cfg.sample_times), 1 / 60)


def test_simulate_shape_and_determinism(theta_mid, short_cfg):
    a = simulate(theta_mid, 1.25, short_cfg)
    b = simulate(theta_mid, 1.25, short_cfg)
    assert a.positions.shape == (short_cfg.n_frames, 9, 2)
    assert a.positions.tobytes() == b.positions.tobytes()


def test_markers_spacing_on_rest_pose():
    p = marker_positions(np.zeros(8))
    np.testing.assert_allclose(p[:, 1], 0.0)
    np.testing.assert_allclose(p[:, 0], [0, 0.2 / 3, 0.4 / 3, 0.2, 0.28, 0.36, 0.44, 0.52, 0.6], atol=1e-15)


def test_mirror_symmetry(theta_mid, short_cfg):
    a = simulate(theta_mid, 1.5, short_cfg)
    b = simulate(theta_mid, 1.5, short_cfg, drive_sign=-1.0)
    mirrored = b.positions * [1.0, -1.0]
    assert np.max(np.abs(a.positions - mirrored)) <= 1e-6


def test_swims_forward(theta_mid):
    tr = simulate(theta_mid, 1.5, SimConfig())
    head = tr.head()
    assert head[-1, 0] - head[0, 0] < 0.0


def test_divergence_reported():
    q0 = np.zeros(8)
    q0[4] = 1.6
    theta = P.swimmer_bounds().midpoint
    with pytest.raises(SimulationDiverged) as exc:
        integrate(theta, 1.0, SimConfig(duration=0.1, warmup=0.0), q0=q0)
    assert exc.value.time == pytest.approx(0.001)


def test_divergent_parameters_raise():
    bounds = P.swimmer_bounds()
    rng = P.make_rng(5)
    cfg = SimConfig(duration=2.0, warmup=0.5)
    hit = False
    for theta in P.uniform_samples(rng, bounds, 60):
        try:
            for f in (0.5, 2.25):
                simulate(theta, f, cfg)
        except SimulationDiverged as exc:
            assert 0 < exc.time <= cfg.duration
            hit = True
            break
    assert hit


def test_bad_inputs(theta_mid):
    with pytest.raises(ValueError):
        simulate(theta_mid, -1.0)
    with pytest.raises(ValueError):
        SimConfig(duration=1.0, warmup=1.0)
    with pytest.raises(ValueError):
        MarkerTrajectory(1.0, 60.0, [0.0, 0.0], np.zeros((2, 9, 2)))
    with pytest.raises(ValueError):
        integrate(theta_mid[:15], 1.0, SimConfig())


def test_csv_roundtrip(theta_mid, short_cfg, tmp_path):
    tr = simulate(theta_mid, 0.75, short_cfg)
    path = tmp_path / trajectory_filename(0.75)
    assert path.name == "freq_0.75Hz.csv"
    write_trajectory_csv(tr, path)
    header = path.read_text().splitlines()[0]
    assert header == "t," + ",".join(f"m{i}{a}" for i in range(9) for a in "xy")
    back = read_trajectory_csv(path, 0.75, 60.0)
    np.testing.assert_allclose(back.positions, tr.positions, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(back.times, tr.times, rtol=1e-8)
