"""Formal robustness certification of ReLU classifiers over input boxes."""

from .bab import BabBudget, BabStats, Domain, beta_crown_domain, branch_and_bound, solve_leaf
from .bounds import (LayerBounds, LinearForm, ObjectiveNet, closed_form_inner_min, crown_backward,
                     crown_bound, empty_splits, intermediate_bounds, interval_bounds,
                     interval_objective_bound, objective_net, relaxation, with_split)
from .optimize import AlphaCrownResult, alpha_crown, optimize_bound
from .outcome import SAFE_COMPLETE, SAFE_INCOMPLETE, UNKNOWN, UNSAFE, VerifyOutcome
from .pipeline import PerturbationSearch, VerifyConfig, max_safe_perturbation, verify_pipeline

__all__ = [
    "BabBudget", "BabStats", "Domain", "beta_crown_domain", "branch_and_bound", "solve_leaf",
    "LayerBounds", "LinearForm", "ObjectiveNet", "closed_form_inner_min", "crown_backward",
    "crown_bound", "empty_splits", "intermediate_bounds", "interval_bounds",
    "interval_objective_bound", "objective_net", "relaxation", "with_split",
    "AlphaCrownResult", "alpha_crown", "optimize_bound",
    "SAFE_COMPLETE", "SAFE_INCOMPLETE", "UNKNOWN", "UNSAFE", "VerifyOutcome",
    "PerturbationSearch", "VerifyConfig", "max_safe_perturbation", "verify_pipeline",
]
