"""
feasible/oracle.py

Brute-force ground truth for the finite MDP: viability kernels, exact
steps-to-violation counts and exhaustive policy enumeration. Nothing here
calls into feasibility or planning.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from feasible.errors import BudgetExceededError
from feasible.mdp_core import FiniteMdp, RegionMask, TabularField, TabularPolicy

logger = logging.getLogger(__name__)

# Steps-to-violation sentinel for cells whose rollout never violates
NEVER = -1

ENUMERATION_BUDGET = 1_000_000


@dataclass(frozen=True, eq=False)
class OracleResult:
    kernel:      RegionMask
    steps:       Optional[np.ndarray] = None     # per cell, NEVER when the rollout is safe forever
    optimal_cdf: Optional[TabularField] = None   # small MDPs only


def viability_kernel(mdp: FiniteMdp) -> RegionMask:
    """
    Greatest subset of the safe cells in which every member has an action
    staying inside: K₀ = {c = 0}, K_{i+1} = {x ∈ K_i : ∃a, f(x, a) ∈ K_i}.
    """
    kernel = ~mdp.violation
    for i in range(mdp.n_cells + 1):
        shrunk = kernel & kernel[mdp.successor].any(axis=1)
        if np.array_equal(shrunk, kernel):
            logger.debug("Viability kernel of %s: %d cells after %d pass(es)",
                         mdp.name, int(kernel.sum()), i + 1)
            break
        kernel = shrunk
    return RegionMask(kernel)


def rollout_steps_to_violation(mdp: FiniteMdp, policy: TabularPolicy, cell: int,
                               cap: Optional[int] = None) -> Union[int, float]:
    """
    First t with c(x_t) = 1 along the rollout from cell, or math.inf once the
    rollout revisits a cell (deterministic, so it cycles safely forever).
    """
    cap     = mdp.n_cells + 1 if cap is None else int(cap)
    x       = int(cell)
    visited = set()
    for t in range(cap + 1):
        if mdp.violation[x]:
            return t
        if x in visited:
            return math.inf
        visited.add(x)
        x = int(mdp.successor[x, policy.actions[x]])
    return math.inf


def steps_to_violation(mdp: FiniteMdp, policy: TabularPolicy) -> np.ndarray:
    """Exact steps-to-violation for every cell (NEVER for safe cycles)."""
    succ    = mdp.successor[np.arange(mdp.n_cells), policy.actions]
    unknown = -2
    steps   = np.full(mdp.n_cells, unknown, dtype=np.int64)
    steps[mdp.violation] = 0

    for start in range(mdp.n_cells):
        if steps[start] != unknown:
            continue
        path, on_path = [], set()
        x = start
        while steps[x] == unknown and x not in on_path:
            on_path.add(x)
            path.append(x)
            x = int(succ[x])
        # Walk ended on a solved cell or closed a cycle of unsolved safe cells
        n = NEVER if steps[x] == unknown else int(steps[x])
        for y in reversed(path):
            n = NEVER if n == NEVER else n + 1
            steps[y] = n
    return steps


def cdf_from_steps(steps: np.ndarray, gamma: float) -> TabularField:
    """F = γ^N, with F = 0 where N is NEVER."""
    safe = steps == NEVER
    return TabularField(np.where(safe, 0.0, gamma ** np.where(safe, 0, steps)), "cdf")


def enumerate_optimal_cdf(mdp: FiniteMdp, budget: int = ENUMERATION_BUDGET) -> TabularField:
    """
    Pointwise min of F^π over all A^S deterministic policies.

    Raises:
        BudgetExceededError: A^S exceeds budget.
    """
    S, A = mdp.n_cells, mdp.n_actions
    if A ** S > budget:
        raise BudgetExceededError(f"{A}^{S} policies exceed the enumeration budget of {budget}")
    best = np.ones(S)
    for combo in itertools.product(range(A), repeat=S):
        steps = steps_to_violation(mdp, TabularPolicy(np.asarray(combo), A))
        best  = np.minimum(best, cdf_from_steps(steps, mdp.gamma).values)
    return TabularField(best, "cdf")


def solve_oracle(mdp: FiniteMdp, policy: Optional[TabularPolicy] = None,
                 enumerate_policies: bool = False) -> OracleResult:
    """Bundle the kernel with optional per-policy steps and enumerated F*."""
    steps = steps_to_violation(mdp, policy) if policy is not None else None
    optimal = enumerate_optimal_cdf(mdp) if enumerate_policies else None
    return OracleResult(viability_kernel(mdp), steps, optimal)


def random_finite_mdp(rng: np.random.Generator, max_cells: int = 12, max_actions: int = 4,
                      hazard_prob: float = 0.3, gamma: float = 0.99,
                      exact_actions: bool = False) -> FiniteMdp:
    """
    Random finite deterministic MDP with 1..max_cells cells and 1..max_actions
    actions (exactly max_actions when exact_actions). Rewards are uniform on
    [-1, 0) rounded to 0.1 so exact value ties occur.
    """
    S = int(rng.integers(1, max_cells + 1))
    A = max_actions if exact_actions else int(rng.integers(1, max_actions + 1))
    successor = rng.integers(0, S, size=(S, A))
    reward    = np.round(rng.uniform(-1.0, 0.0, size=(S, A)), 1)
    violation = rng.random(S) < hazard_prob
    return FiniteMdp.from_tables(successor, reward, violation, gamma, name=f"random-{S}x{A}")
