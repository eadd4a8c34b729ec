"""
feasible: feasible policy iteration on finite deterministic MDPs.

Modules:
    mdp_core       finite MDP containers, grid discretization, sweep helper
    environments   ACC, Pendulum, windy gridworld, CBF baselines
    feasibility    constraint decay functions and the risky Bellman solver
    planning       evaluation, region-wise improvement, FPI, feasible Bellman
    oracle         viability kernels and brute-force ground truth
    checks         invariant suite behind `fpi.py verify`
    artifacts      CSV / PGM / JSON writers
    config         run configuration and presets
"""

from feasible.errors import (BudgetExceededError, ConfigError, ConvergenceError, FpiError,
                             InconsistentInputError, NonFiniteModelError)
from feasible.feasibility import (CdfSolution, FixedPointConfig, apply_cdf_operator,
                                  apply_risky_operator, extract_region,
                                  identify_feasible_region, solve_risky_bellman)
from feasible.mdp_core import (FiniteMdp, GridSpec, RegionMask, TabularField, TabularPolicy,
                               discretize)
from feasible.oracle import (enumerate_optimal_cdf, rollout_steps_to_violation,
                             viability_kernel)
from feasible.planning import (FpiReport, ImprovementConfig, evaluate_policy, improve_barrier,
                               improve_region_wise, run_fpi, solve_feasible_bellman)

__all__ = [
    "BudgetExceededError", "ConfigError", "ConvergenceError", "FpiError",
    "InconsistentInputError", "NonFiniteModelError",
    "CdfSolution", "FixedPointConfig", "apply_cdf_operator", "apply_risky_operator",
    "extract_region", "identify_feasible_region", "solve_risky_bellman",
    "FiniteMdp", "GridSpec", "RegionMask", "TabularField", "TabularPolicy", "discretize",
    "enumerate_optimal_cdf", "rollout_steps_to_violation", "viability_kernel",
    "FpiReport", "ImprovementConfig", "evaluate_policy", "improve_barrier",
    "improve_region_wise", "run_fpi", "solve_feasible_bellman",
]
