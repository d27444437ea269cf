import math

import numpy as np
import pytest

from swimcal import params as P
from swimcal.baselines import (
    BayesOptConfig,
    CmaesConfig,
    run_bayesopt,
    run_cmaes,
    run_random,
)
from swimcal.baselines.bayesopt import expected_improvement, penalize_infinite, standardize
from swimcal.baselines.cmaes import CMAES, default_popsize
from swimcal.baselines.gp import (
    GPFitError,
    _factor,
    fit_hyperparameters,
    gp_posterior,
    log_marginal_likelihood,
    matern52,
)
from swimcal.objective import FunctionEvaluator


def sphere16(theta):
    return float(np.sum((theta - 0.5) ** 2))


def test_popsize():
    assert default_popsize(16) == 12
    assert default_popsize(2) == 6
    with pytest.raises(ValueError):
        CmaesConfig(sigma0=0.0)
    with pytest.raises(ValueError):
        CmaesConfig(popsize=3)


def test_random_search_budget_and_seed_match(bounds):
    rec = run_random(bounds, FunctionEvaluator(sphere16), 1, seed=3)
    assert rec.charged_evaluations == 1
    np.testing.assert_array_equal(rec.initial_theta, P.random_init(3, bounds))
    rec = run_random(bounds, FunctionEvaluator(sphere16), 25, seed=3)
    assert rec.charged_evaluations == 25 and np.all(np.diff(rec.curve) <= 0)
    assert all(bounds.contains(np.array(e["theta"])) for e in rec.evaluations)


def test_cmaes_generation_layout(bounds):
    ev = FunctionEvaluator(sphere16)
    rec = run_cmaes(CmaesConfig(), P.ParamBounds.unit_box(16), ev, 40, seed=0)
    assert rec.config["popsize"] == 12
    assert rec.config["full_generations"] == 3 and rec.config["partial_generation_size"] == 4
    assert rec.config["sigma0"] == 0.2
    assert ev.count == 40 == len(rec.curve)
    np.testing.assert_array_equal(rec.config["mean0_theta"], P.random_init(0, P.ParamBounds.unit_box(16)))
    assert all(0 <= min(e["theta"]) and max(e["theta"]) <= 1 for e in rec.evaluations)


@pytest.mark.parametrize("budget", [1, 5, 12, 13, 37])
def test_cmaes_exact_budget(budget):
    ev = FunctionEvaluator(sphere16)
    rec = run_cmaes(CmaesConfig(), P.ParamBounds.unit_box(16), ev, budget, seed=1)
    assert ev.count == budget == rec.charged_evaluations


def test_cmaes_sphere_improves():
    box = P.ParamBounds.unit_box(16)
    wins = 0
    for seed in range(5):
        rec = run_cmaes(CmaesConfig(), box, FunctionEvaluator(sphere16), 600, seed)
        wins += rec.loss_best <= 1e-2 * rec.curve[0]
    assert wins >= 4


def test_cmaes_relabeling_invariance():
    rng = np.random.default_rng(0)
    n = 6
    perm = rng.permutation(n)
    centre = rng.uniform(0.2, 0.8, n)
    f = lambda x: float(np.sum((np.arange(1, n + 1) * (x - centre)) ** 2))
    f_perm = lambda x: f(x[np.argsort(perm)])
    a = CMAES(np.full(n, 0.5), 0.2, rng=P.make_rng(1))
    b = CMAES(np.full(n, 0.5)[perm], 0.2, rng=P.make_rng(2))
    for _ in range(8):
        xs = a.ask()
        fs = [f(x) for x in xs]
        fs_b = [f_perm(x[perm]) for x in xs]
        np.testing.assert_allclose(fs, fs_b, rtol=1e-14)
        a.tell(xs, fs)
        b.tell(xs[:, perm], fs_b)
        np.testing.assert_allclose(b.mean, a.mean[perm], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(b.C, a.C[np.ix_(perm, perm)], rtol=1e-10, atol=1e-14)
        assert b.sigma == pytest.approx(a.sigma, rel=1e-12)


def test_cmaes_explicit_draws():
    es = CMAES(np.zeros(3), 0.5, popsize=4)
    z = np.arange(12.0).reshape(4, 3)
    np.testing.assert_allclose(es.ask(z), 0.5 * z)


def test_cmaes_degenerate_covariance_resets():
    es = CMAES(np.full(4, 0.5), 0.2)
    es.C[:] = np.nan
    es._decompose()
    np.testing.assert_array_equal(es.C, np.eye(4))
    assert es.events and "reset" in es.events[0]


def _matern_loop(a, b, ls, sf2):
    r = math.sqrt(sum(((x - y) / l) ** 2 for x, y, l in zip(a, b, ls)))
    return sf2 * (1 + math.sqrt(5) * r + 5 * r * r / 3) * math.exp(-math.sqrt(5) * r)


def test_gp_matches_dense_inverse():
    rng = np.random.default_rng(8)
    for _ in range(20):
        X = rng.random((5, 3))
        y = rng.normal(size=5)
        Xq = rng.random((7, 3))
        ls = rng.uniform(0.2, 2.0, 3)
        sf2 = rng.uniform(0.5, 2.0)
        jitter = 1e-8
        K = np.array([[_matern_loop(a, b, ls, sf2) for b in X] for a in X]) + jitter * np.eye(5)
        Ks = np.array([[_matern_loop(a, q, ls, sf2) for q in Xq] for a in X])
        Kinv = np.linalg.inv(K)
        mean_ref = Ks.T @ Kinv @ y
        var_ref = sf2 - np.einsum("iq,ij,jq->q", Ks, Kinv, Ks)
        mean, var = gp_posterior(X, y, Xq, ls, sf2, jitter)
        np.testing.assert_allclose(mean, mean_ref, atol=1e-8)
        np.testing.assert_allclose(var, np.maximum(var_ref, 0), atol=1e-8)


def test_gp_interpolation_and_prior_reversion():
    rng = np.random.default_rng(3)
    X = rng.random((6, 2))
    y = standardize(rng.normal(size=6))
    mean, var = gp_posterior(X, y, X, [0.3, 0.3], 1.0, 1e-8)
    np.testing.assert_allclose(mean, y, atol=1e-4)
    assert np.all(var < 1e-6)
    _, far = gp_posterior(X, y, np.array([[100.0, 100.0]]), [0.3, 0.3], 1.7, 1e-8)
    assert far[0] == pytest.approx(1.7, rel=1e-6)


def test_kernel_formula():
    k = matern52(np.array([[0.0, 0.0]]), np.array([[0.3, 0.4]]), np.array([1.0, 1.0]), 2.0)[0, 0]
    r = 0.5
    assert k == pytest.approx(2.0 * (1 + math.sqrt(5) * r + 5 * r * r / 3) * math.exp(-math.sqrt(5) * r))


def test_jitter_escalation():
    K = np.diag([1.0, 1.0, -1e-5])
    L, used = _factor(K, 1e-8)
    assert used == pytest.approx(1e-4)
    with pytest.raises(GPFitError):
        _factor(np.diag([1.0, -1.0]), 1e-8)
    with pytest.raises(ValueError):
        gp_posterior(np.zeros((1, 2)), [0.0], np.zeros((1, 2)), [0.0, 1.0])


def test_hyperparameter_fit_never_decreases_likelihood():
    rng = np.random.default_rng(5)
    X = rng.random((12, 3))
    y = standardize(np.sin(6 * X[:, 0]) + X[:, 1] ** 2)
    ls, sf2, lml, trace = fit_hyperparameters(X, y, np.random.default_rng(0), n_steps=50, n_starts=2)
    assert np.all(np.diff(trace) > 0)
    assert lml == trace[-1]
    assert lml == pytest.approx(log_marginal_likelihood(X, y, ls, sf2))
    default = log_marginal_likelihood(X, y, np.full(3, 0.5), 1.0)
    assert lml >= default


def test_expected_improvement():
    assert expected_improvement([1.0], [0.0], best=0.5)[0] == 0.0
    assert expected_improvement([0.5], [0.0], best=0.5)[0] == 0.0
    assert expected_improvement([0.0], [0.0], best=0.5, xi=0.01)[0] == pytest.approx(0.49)
    from scipy.stats import norm
    m, s, best, xi = 0.2, 0.3, 0.4, 0.01
    z = (best - m - xi) / s
    expected = (best - m - xi) * norm.cdf(z) + s * norm.pdf(z)
    assert expected_improvement([m], [s * s], best, xi)[0] == pytest.approx(expected, rel=1e-12)


def test_penalize_and_standardize():
    out = penalize_infinite([1.0, 2.0, math.inf])
    assert out[2] == pytest.approx(2.0 + 3 * 0.5)
    assert np.all(penalize_infinite([math.inf, math.inf]) == 1.0)
    z = standardize(np.array([1.0, 2.0, 3.0]))
    assert z.mean() == pytest.approx(0) and z.std() == pytest.approx(1)
    np.testing.assert_array_equal(standardize(np.array([4.0])), [0.0])


def test_bayesopt_quadratic():
    box = P.ParamBounds.unit_box(1)
    hits = 0
    for seed in range(5):
        rec = run_bayesopt(BayesOptConfig(), box, FunctionEvaluator(lambda x: float((x[0] - 0.3) ** 2)), 40, seed)
        assert rec.charged_evaluations == 40
        hits += abs(rec.theta_best[0] - 0.3) <= 0.05
    assert hits >= 4


def test_bayesopt_handles_divergence_and_seed_match(bounds):
    ev = FunctionEvaluator(lambda th: math.inf if th[0] > 7 else sphere16(P.normalize(th, bounds)))
    rec = run_bayesopt(BayesOptConfig(n_candidates=128), bounds, ev, 9, seed=2)
    assert ev.count == 9 and np.all(np.diff(rec.curve) <= 0)
    np.testing.assert_array_equal(rec.initial_theta, P.random_init(2, bounds))
    np.testing.assert_array_equal(rec.evaluations[0]["theta"], P.random_init(2, bounds))
    with pytest.raises(ValueError):
        run_bayesopt(BayesOptConfig(), bounds, ev, 5, seed=0)
