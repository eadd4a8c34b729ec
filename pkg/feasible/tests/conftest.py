"""
feasible/tests/conftest.py

Shared hand-built MDPs. Cell 2 of the three-cell chain violates; cell 0 can
loop on itself or step to cell 1, and cell 1 can step back to 0 or into the
hazard.
"""

import numpy as np
import pytest

from feasible.config import PRESETS
from feasible.environments import default_grid, make_env
from feasible.mdp_core import FiniteMdp, TabularPolicy, discretize


@pytest.fixture
def chain3() -> FiniteMdp:
    return FiniteMdp.from_tables(
        successor=[[0, 1], [0, 2], [1, 2]],
        reward=[[-1.0, 0.0], [-2.0, 0.0], [0.0, 0.0]],
        violation=[0, 0, 1],
        gamma=0.9,
        name="chain3",
    )


@pytest.fixture
def chain4() -> FiniteMdp:
    """Single-action chain 0 → 1 → 2 → 3 with cell 3 violating."""
    return FiniteMdp.from_tables(
        successor=[[1], [2], [3], [3]],
        reward=np.zeros((4, 1)),
        violation=[0, 0, 0, 1],
        gamma=0.99,
        name="chain4",
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


def preset_mdp(name: str, gamma: float = 0.99) -> FiniteMdp:
    preset = PRESETS[name]
    env    = make_env(preset["env"], preset.get("env_params"))
    grid   = default_grid(env, preset.get("grid"), preset.get("actions"))
    return discretize(env, grid, gamma)


@pytest.fixture(scope="module")
def tiny_mdp() -> FiniteMdp:
    return preset_mdp("tiny")


@pytest.fixture(scope="module")
def gridworld_mdp() -> FiniteMdp:
    return preset_mdp("gridworld")


def stay_policy(mdp: FiniteMdp) -> TabularPolicy:
    return TabularPolicy.constant(mdp.n_cells, mdp.n_actions, 0)
