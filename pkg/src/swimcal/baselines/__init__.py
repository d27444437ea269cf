"""Budget-matched black-box baselines that share the calibration objective."""

from swimcal.baselines.bayesopt import BayesOptConfig, expected_improvement, run_bayesopt
from swimcal.baselines.cmaes import CMAES, CmaesConfig, run_cmaes
from swimcal.baselines.gp import GPFitError, fit_hyperparameters, gp_posterior, log_marginal_likelihood, matern52
from swimcal.baselines.random_search import run_random

__all__ = [
    "BayesOptConfig",
    "CMAES",
    "CmaesConfig",
    "GPFitError",
    "expected_improvement",
    "fit_hyperparameters",
    "gp_posterior",
    "log_marginal_likelihood",
    "matern52",
    "run_bayesopt",
    "run_cmaes",
    "run_random",
]
