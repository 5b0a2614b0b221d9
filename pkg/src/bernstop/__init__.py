"""Optimal stopping rules for Bernoulli parameter estimation."""

from .beta_core import BetaParams, beta_mean, beta_variance, digamma, trigamma
from .designers import (DesignConfig, binomial_rule, design, design_dp, design_greedy, design_threshold,
                        dp_bracket, greedy_path, negbinomial_rule, threshold_for_budget)
from .evaluation import (Estimator, Population, conditional_expected_trials, conditional_mse,
                         mse_vs_budget_sweep, simulate_many, simulate_stop)
from .oracle import ParamSet, allocation_gain_beta, allocation_gain_discrete, oracle_allocation
from .trellis import Estimand, NodeId, StoppingRule, evaluate, load_rule, save_rule

__version__ = "0.1.0"

__all__ = [
    "BetaParams", "beta_mean", "beta_variance", "digamma", "trigamma",
    "DesignConfig", "binomial_rule", "design", "design_dp", "design_greedy", "design_threshold",
    "dp_bracket", "greedy_path", "negbinomial_rule", "threshold_for_budget",
    "Estimator", "Population", "conditional_expected_trials", "conditional_mse",
    "mse_vs_budget_sweep", "simulate_many", "simulate_stop",
    "ParamSet", "allocation_gain_beta", "allocation_gain_discrete", "oracle_allocation",
    "Estimand", "NodeId", "StoppingRule", "evaluate", "load_rule", "save_rule",
]
