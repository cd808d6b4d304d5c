"""Top-two allocation rules for best-arm identification with Bayesian beliefs."""

from .expfam import InstanceSpec, ObservationModel, DomainError, kl, c_cost
from .exponent import ExponentSolution, SolverError, solve_gamma_beta, solve_gamma_star
from .posterior import BeliefState, update, sample_means
from .optprob import AlphaTracker, OptimalityEstimate, alpha_quadrature, sample_approx
from .rules import RuleConfig, make_policy
from .sim import StoppingSpec, Trace, aggregate, fit_exponent, hitting_times, run_trial, run_trials

__all__ = [
    "InstanceSpec", "ObservationModel", "DomainError", "kl", "c_cost",
    "ExponentSolution", "SolverError", "solve_gamma_beta", "solve_gamma_star",
    "BeliefState", "update", "sample_means",
    "AlphaTracker", "OptimalityEstimate", "alpha_quadrature", "sample_approx",
    "RuleConfig", "make_policy",
    "StoppingSpec", "Trace", "aggregate", "fit_exponent", "hitting_times", "run_trial", "run_trials",
]
__version__ = "0.1.0"
