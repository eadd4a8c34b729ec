"""
feasible/tests/test_oracle.py

Viability kernels, steps-to-violation and exhaustive enumeration, checked
against the risky Bellman solver on random MDPs.

Run:
    pytest feasible/tests/test_oracle.py -v
"""

import math

import numpy as np
import pytest

from feasible.environments import default_grid, gridworld_env
from feasible.errors import BudgetExceededError
from feasible.feasibility import extract_region, identify_feasible_region, solve_risky_bellman
from feasible.mdp_core import FiniteMdp, TabularPolicy, discretize
from feasible.oracle import (NEVER, cdf_from_steps, enumerate_optimal_cdf, random_finite_mdp,
                             rollout_steps_to_violation, solve_oracle, steps_to_violation,
                             viability_kernel)


class TestViabilityKernel:
    def test_chain(self, chain3):
        assert viability_kernel(chain3).mask.tolist() == [True, True, False]

    def test_all_hazard_is_empty(self):
        mdp = FiniteMdp.from_tables([[1], [0]], np.zeros((2, 1)), [1, 1])
        assert viability_kernel(mdp).count() == 0

    def test_all_safe_is_everything(self):
        mdp = FiniteMdp.from_tables([[1], [0]], np.zeros((2, 1)), [0, 0])
        assert viability_kernel(mdp).count() == 2

    def test_safe_cell_draining_into_hazard(self, chain4):
        assert viability_kernel(chain4).count() == 0

    def test_enclosed_cell(self):
        env = gridworld_env(width=3, height=5,
                            hazard_cells=[(1, 2), (1, 3), (1, 4), (0, 3), (2, 3)],
                            wind=[0, 2, 0])
        mdp  = discretize(env, default_grid(env))
        cell = int(mdp.grid.flat_index([1, 1])[0])
        star = solve_risky_bellman(mdp)
        assert star.F.values[cell] == mdp.gamma
        assert not viability_kernel(mdp).mask[cell]

    def test_adding_hazards_shrinks_kernel(self, rng):
        for _ in range(50):
            mdp  = random_finite_mdp(rng)
            safe = np.flatnonzero(~mdp.violation)
            if safe.size == 0:
                continue
            viol = mdp.violation.copy()
            viol[rng.choice(safe)] = True
            harder = FiniteMdp.from_tables(mdp.successor, mdp.reward, viol, mdp.gamma)
            assert viability_kernel(harder).issubset(viability_kernel(mdp))


class TestStepsToViolation:
    def test_rollout_counts(self, chain3):
        unsafe = TabularPolicy.constant(3, 2, 1)
        assert rollout_steps_to_violation(chain3, unsafe, 0) == 2
        assert rollout_steps_to_violation(chain3, unsafe, 2) == 0

    def test_safe_cycle_is_infinite(self, chain3):
        assert rollout_steps_to_violation(chain3, TabularPolicy.constant(3, 2, 0), 0) == math.inf

    def test_array_form(self, chain3):
        assert steps_to_violation(chain3, TabularPolicy.constant(3, 2, 1)).tolist() == [2, 1, 0]
        assert steps_to_violation(chain3, TabularPolicy.constant(3, 2, 0)).tolist() == [NEVER, NEVER, 0]

    def test_matches_per_policy_cdf(self, rng):
        for _ in range(30):
            mdp   = random_finite_mdp(rng)
            pol   = TabularPolicy.random(mdp.n_cells, mdp.n_actions, rng)
            steps = steps_to_violation(mdp, pol)
            F     = identify_feasible_region(mdp, pol).F.values
            assert np.allclose(F, cdf_from_steps(steps, mdp.gamma).values, atol=1e-10)
            for cell in range(mdp.n_cells):
                walk = rollout_steps_to_violation(mdp, pol, cell)
                assert walk == (math.inf if steps[cell] == NEVER else steps[cell])


class TestEnumeration:
    def test_chain(self, chain3):
        assert enumerate_optimal_cdf(chain3).values.tolist() == [0.0, 0.0, 1.0]

    def test_budget(self):
        S   = 21
        mdp = FiniteMdp.from_tables(np.zeros((S, 2), dtype=int), np.zeros((S, 2)), np.zeros(S))
        with pytest.raises(BudgetExceededError):
            enumerate_optimal_cdf(mdp)

    def test_matches_risky_bellman(self, rng):
        for _ in range(25):
            mdp   = random_finite_mdp(rng, max_cells=6, max_actions=2, exact_actions=True)
            brute = enumerate_optimal_cdf(mdp).values
            star  = solve_risky_bellman(mdp).F.values
            assert np.max(np.abs(brute - star)) <= 1e-10

    def test_solve_oracle_bundle(self, chain3):
        res = solve_oracle(chain3, TabularPolicy.constant(3, 2, 1), enumerate_policies=True)
        assert res.kernel.count() == 2
        assert res.steps.tolist() == [2, 1, 0]
        assert res.optimal_cdf.values.tolist() == [0.0, 0.0, 1.0]


class TestOracleEquivalence:
    def test_hundred_random_mdps(self):
        rng = np.random.default_rng(0)
        for i in range(100):
            mdp    = random_finite_mdp(rng)
            region = extract_region(solve_risky_bellman(mdp).F, 0.1)
            diff   = region.mismatches(viability_kernel(mdp))
            assert diff.size == 0, f"mdp {i}: cells {diff.tolist()} disagree"

    def test_threshold_independent(self, rng):
        for _ in range(20):
            mdp  = random_finite_mdp(rng)
            star = solve_risky_bellman(mdp).F
            assert extract_region(star, 0.01).mismatches(extract_region(star, 0.5)).size == 0
