"""
feasible/environments.py

Classic control tasks (ACC, Pendulum), a windy gridworld for exact small-scale
tests, and the handcrafted CBF baselines for ACC and Pendulum.

Every dynamics / reward / constraint callable is pure and vectorized:
    dynamics(states [N, n], actions [N, m]) -> next states [N, n]
    reward(states [N, n], actions [N, m])   -> [N]
    constraint(states [N, n])               -> [N, k]   (violated iff any > 0)

Numeric defaults (Δs_max, θ_max, a_max, τ_max, Δt, pendulum m/l/g) are not
recovered from any published source; they are declared here, validated by the
parameter models, and echoed into every artifact via env.params.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from feasible.errors import ConfigError
from feasible.mdp_core import GridSpec, RegionMask, action_grid

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvironmentSpec:
    name:         str
    state_dim:    int
    action_dim:   int
    dynamics:     Callable[[np.ndarray, np.ndarray], np.ndarray]
    reward:       Callable[[np.ndarray, np.ndarray], np.ndarray]
    constraint:   Callable[[np.ndarray], np.ndarray]
    state_lower:  Tuple[float, ...]
    state_upper:  Tuple[float, ...]
    action_lower: Tuple[float, ...] = ()
    action_upper: Tuple[float, ...] = ()
    # Fixed action list for inherently discrete environments (gridworld moves)
    discrete_actions: Optional[Tuple[Tuple[float, ...], ...]] = None
    params:       Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class CbfSpec:
    """Barrier B(x) with decay λ; the safe set is {B <= 0}."""

    name:    str
    barrier: Callable[[np.ndarray], np.ndarray]
    lam:     float = 0.1

    def __post_init__(self):
        if not (0.0 < self.lam <= 1.0):
            raise ValueError(f"CBF decay λ must lie in (0, 1], got {self.lam}")


CBF_DECAY = 0.1   # barrier decay λ shared by the handcrafted CBFs


class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _cols(states: np.ndarray) -> Tuple[np.ndarray, ...]:
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    return tuple(s[:, i] for i in range(s.shape[1]))


# ---------------------------------------------------------------------------
# ACC: state (Δs, Δv), action a (acceleration of the following vehicle)
# ---------------------------------------------------------------------------

class AccParams(_Params):
    ds_max:   float = Field(10.0, gt=0)    # constraint |Δs| <= ds_max
    a_max:    float = Field(2.0, gt=0)     # action bound
    dt:       float = Field(0.1, gt=0)     # forward-Euler timestep (s)
    ds_bound: float = Field(12.0, gt=0)    # working domain |Δs| <= ds_bound
    dv_bound: float = Field(6.0, gt=0)     # working domain |Δv| <= dv_bound
    cbf_lambda: float = Field(CBF_DECAY, gt=0, le=1)


def acc_env(params: Optional[Mapping] = None) -> EnvironmentSpec:
    """
    Adaptive cruise control. One step of forward Euler on ẋ₁ = x₂, ẋ₂ = −u:
        Δs ← Δs + Δt·Δv,   Δv ← Δv − Δt·a
    r = −0.001Δs² − 0.01Δv² − a²,   h = |Δs| − Δs_max.
    """
    p = AccParams(**dict(params or {}))

    def dynamics(states, actions):
        ds, dv = _cols(states)
        (a,)   = _cols(actions)
        return np.stack([ds + p.dt * dv, dv - p.dt * a], axis=1)

    def reward(states, actions):
        ds, dv = _cols(states)
        (a,)   = _cols(actions)
        return -0.001 * ds ** 2 - 0.01 * dv ** 2 - a ** 2

    def constraint(states):
        ds, _ = _cols(states)
        return (np.abs(ds) - p.ds_max)[:, None]

    return EnvironmentSpec(
        name="acc", state_dim=2, action_dim=1,
        dynamics=dynamics, reward=reward, constraint=constraint,
        state_lower=(-p.ds_bound, -p.dv_bound), state_upper=(p.ds_bound, p.dv_bound),
        action_lower=(-p.a_max,), action_upper=(p.a_max,),
        params=p.model_dump(),
    )


# ---------------------------------------------------------------------------
# Pendulum: state (θ, θ̇), θ = 0 upright, action τ
# ---------------------------------------------------------------------------

class PendulumParams(_Params):
    mass:        float = Field(1.0, gt=0)
    length:      float = Field(1.0, gt=0)
    gravity:     float = Field(9.8, gt=0)
    dt:          float = Field(0.1, gt=0)
    tau_max:     float = Field(2.0, gt=0)
    theta_max:   float = Field(math.pi / 2, gt=0)
    theta_bound: float = Field(2.0, gt=0)   # working domain |θ| <= theta_bound
    omega_bound: float = Field(8.0, gt=0)   # working domain |θ̇| <= omega_bound
    cbf_lambda:  float = Field(CBF_DECAY, gt=0, le=1)


def pendulum_env(params: Optional[Mapping] = None) -> EnvironmentSpec:
    """
    Inverted pendulum with θ measured from upright (gravity destabilizes):
        θ̈ = (g/l)·sin θ + τ/(m·l²)
    forward Euler on (θ, θ̇) using the pre-step state for both components.
    r = −0.1θ² − 0.01θ̇² − τ²,   h = |θ| − θ_max.
    """
    p = PendulumParams(**dict(params or {}))
    g_over_l = p.gravity / p.length
    inertia  = p.mass * p.length ** 2

    def dynamics(states, actions):
        th, om = _cols(states)
        (tau,) = _cols(actions)
        acc    = g_over_l * np.sin(th) + tau / inertia
        return np.stack([th + p.dt * om, om + p.dt * acc], axis=1)

    def reward(states, actions):
        th, om = _cols(states)
        (tau,) = _cols(actions)
        return -0.1 * th ** 2 - 0.01 * om ** 2 - tau ** 2

    def constraint(states):
        th, _ = _cols(states)
        return (np.abs(th) - p.theta_max)[:, None]

    return EnvironmentSpec(
        name="pendulum", state_dim=2, action_dim=1,
        dynamics=dynamics, reward=reward, constraint=constraint,
        state_lower=(-p.theta_bound, -p.omega_bound),
        state_upper=(p.theta_bound, p.omega_bound),
        action_lower=(-p.tau_max,), action_upper=(p.tau_max,),
        params={**p.model_dump(), "sign_convention": "theta=0 upright"},
    )


# ---------------------------------------------------------------------------
# Windy gridworld: exact finite MDP for oracle-equivalence tests
# ---------------------------------------------------------------------------

GRID_DIST_PENALTY = 0.1    # per unit of Manhattan distance to the goal
GRID_STEP_COST    = 0.05   # charged for any non-stay action

_MOVES_4 = [(0, 0), (0, 1), (0, -1), (-1, 0), (1, 0)]          # stay, up, down, left, right
_MOVES_8 = _MOVES_4 + [(1, 1), (1, -1), (-1, 1), (-1, -1)]


class GridworldParams(_Params):
    width:   int = Field(11, ge=2)
    height:  int = Field(11, ge=2)
    hazards: List[Tuple[int, int]] = Field(default_factory=list)
    goal:    Tuple[int, int] = (0, 0)
    moves:   int = 4
    # Upward push per column, applied from the origin column after the move
    wind:    List[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_layout(self):
        def inside(c):
            return 0 <= c[0] < self.width and 0 <= c[1] < self.height
        bad = [c for c in self.hazards if not inside(c)]
        if bad:
            raise ValueError(f"hazard cells outside the {self.width}x{self.height} grid: {bad}")
        if not inside(self.goal):
            raise ValueError(f"goal {self.goal} outside the {self.width}x{self.height} grid")
        if self.moves not in (4, 8):
            raise ValueError(f"moves must be 4 or 8, got {self.moves}")
        if self.wind and len(self.wind) != self.width:
            raise ValueError(f"wind needs one entry per column ({self.width}), got {len(self.wind)}")
        if any(w < 0 for w in self.wind):
            raise ValueError("wind strengths must be non-negative")
        return self


def gridworld_env(width: int = 11, height: int = 11, hazard_cells=(),
                  goal_cell=(0, 0), moves: int = 4, wind=None) -> EnvironmentSpec:
    """
    Gridworld on integer coordinates (x, y), y growing upward.

    Moves whose target leaves the grid stay in place; then the origin column's
    wind pushes the agent up (clamped at the top wall). h = +1 on hazard cells,
    −1 elsewhere. r = −0.1·manhattan(state, goal) − 0.05·[action moves].
    """
    p = GridworldParams(width=width, height=height,
                        hazards=[tuple(int(v) for v in c) for c in hazard_cells],
                        goal=tuple(int(v) for v in goal_cell),
                        moves=moves, wind=list(wind or []))
    hazard_map = np.zeros((p.width, p.height), dtype=bool)
    for x, y in p.hazards:
        hazard_map[x, y] = True
    wind_arr = np.asarray(p.wind or [0] * p.width, dtype=np.int64)
    gx, gy   = p.goal
    moves_list = tuple(tuple(float(v) for v in m) for m in (_MOVES_4 if p.moves == 4 else _MOVES_8))

    def _xy(states):
        s = np.rint(np.atleast_2d(states)).astype(np.int64)
        return s[:, 0], s[:, 1]

    def dynamics(states, actions):
        x, y   = _xy(states)
        dx, dy = _xy(actions)
        tx, ty = x + dx, y + dy
        inside = (tx >= 0) & (tx < p.width) & (ty >= 0) & (ty < p.height)
        nx     = np.where(inside, tx, x)
        ny     = np.minimum(np.where(inside, ty, y) + wind_arr[x], p.height - 1)
        return np.stack([nx, ny], axis=1).astype(np.float64)

    def reward(states, actions):
        x, y   = _xy(states)
        dx, dy = _xy(actions)
        moving = (dx != 0) | (dy != 0)
        return -GRID_DIST_PENALTY * (np.abs(x - gx) + np.abs(y - gy)) - GRID_STEP_COST * moving

    def constraint(states):
        x, y = _xy(states)
        x    = np.clip(x, 0, p.width - 1)
        y    = np.clip(y, 0, p.height - 1)
        return np.where(hazard_map[x, y], 1.0, -1.0)[:, None]

    return EnvironmentSpec(
        name="gridworld", state_dim=2, action_dim=2,
        dynamics=dynamics, reward=reward, constraint=constraint,
        state_lower=(0.0, 0.0), state_upper=(float(p.width - 1), float(p.height - 1)),
        discrete_actions=moves_list,
        params=p.model_dump(),
    )


def _gridworld_from_params(params: Optional[Mapping] = None) -> EnvironmentSpec:
    p = GridworldParams.model_validate(dict(params or {}))
    return gridworld_env(width=p.width, height=p.height, hazard_cells=p.hazards,
                         goal_cell=p.goal, moves=p.moves, wind=p.wind)


ENVIRONMENTS: Dict[str, Callable[[Optional[Mapping]], EnvironmentSpec]] = {
    "acc":       acc_env,
    "pendulum":  pendulum_env,
    "gridworld": _gridworld_from_params,
}


def make_env(name: str, params: Optional[Mapping] = None) -> EnvironmentSpec:
    """
    Build a registered environment from a parameter bag.

    Raises:
        ValueError:  unknown environment name.
        ConfigError: a parameter is unknown or out of range; `field` names it.
    """
    if name not in ENVIRONMENTS:
        raise ValueError(f"unknown environment {name!r} (available: {sorted(ENVIRONMENTS)})")
    try:
        return ENVIRONMENTS[name](params)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(["env_params", *(str(p) for p in first.get("loc", ()))])
        raise ConfigError(f"invalid {name} parameter '{where}': {first['msg']}",
                          field=where) from exc


def default_grid(env: EnvironmentSpec, cells: Optional[List[int]] = None,
                 actions: Optional[List[int]] = None) -> GridSpec:
    """
    GridSpec over the env's working domain.

    Discrete environments use their own node lattice and move list; `cells`
    and `actions` are ignored for them. Continuous environments default to
    201 cells per state dimension and 41 actions per action dimension.
    """
    if env.discrete_actions is not None:
        cells = [int(hi - lo) + 1 for lo, hi in zip(env.state_lower, env.state_upper)]
        return GridSpec.from_bounds(env.state_lower, env.state_upper, cells, env.discrete_actions)
    cells   = list(cells or [201] * env.state_dim)
    actions = list(actions or [41] * env.action_dim)
    if len(cells) != env.state_dim:
        raise ValueError(f"{env.name} needs {env.state_dim} grid resolutions, got {len(cells)}")
    if len(actions) != env.action_dim:
        raise ValueError(f"{env.name} needs {env.action_dim} action counts, got {len(actions)}")
    return GridSpec.from_bounds(env.state_lower, env.state_upper, cells,
                                action_grid(env.action_lower, env.action_upper, actions))


# ---------------------------------------------------------------------------
# Handcrafted CBF baselines
# ---------------------------------------------------------------------------


def acc_cbf(params: Optional[Mapping] = None) -> CbfSpec:
    """B = −10 + Δs + 4.5Δv (Δv >= 0),  −10 − Δs − 3.2Δv (Δv < 0)."""
    lam = float(dict(params or {}).get("cbf_lambda", CBF_DECAY))

    def barrier(states):
        ds, dv = _cols(states)
        return np.where(dv >= 0, -10.0 + ds + 4.5 * dv, -10.0 - ds - 3.2 * dv)

    return CbfSpec("acc", barrier, lam)


def pendulum_cbf(params: Optional[Mapping] = None) -> CbfSpec:
    """B = −θ_max + θ + 0.3θ̇ (θ̇ >= 0),  −θ_max − θ − 0.3θ̇ (θ̇ < 0)."""
    p         = dict(params or {})
    theta_max = float(p.get("theta_max", math.pi / 2))
    lam       = float(p.get("cbf_lambda", CBF_DECAY))

    def barrier(states):
        th, om = _cols(states)
        return np.where(om >= 0, -theta_max + th + 0.3 * om, -theta_max - th - 0.3 * om)

    return CbfSpec("pendulum", barrier, lam)


CBFS: Dict[str, Callable[[Optional[Mapping]], CbfSpec]] = {
    "acc":      acc_cbf,
    "pendulum": pendulum_cbf,
}


def cbf_region(cbf: CbfSpec, grid: GridSpec) -> RegionMask:
    """Zero-sublevel set {B <= 0} on the grid's cell centres."""
    return RegionMask(cbf.barrier(grid.centers()) <= 0)


def cbf_counterexamples(cbf: CbfSpec, env: EnvironmentSpec, grid: GridSpec) -> np.ndarray:
    """
    Cells inside {B <= 0} that violate h. A non-empty result means the barrier
    is not conservative for this parameter bag; it is logged, never dropped.
    """
    centers = grid.centers()
    inside  = cbf.barrier(centers) <= 0
    h       = np.asarray(env.constraint(centers)).reshape(centers.shape[0], -1)
    cells   = np.flatnonzero(inside & (h > 0).any(axis=1))
    if cells.size:
        logger.warning("%s CBF: %d cell(s) of {B <= 0} violate the constraint "
                       "(first %s), parameter bag flagged", cbf.name, cells.size,
                       cells[:5].tolist())
    return cells


def cbf_one_step_violations(cbf: CbfSpec, env: EnvironmentSpec, grid: GridSpec) -> np.ndarray:
    """
    Cells of {B <= 0} where no action satisfies B(f(x,u)) − B(x) <= −λB(x),
    evaluated on the continuous successor f(x,u).
    """
    centers = grid.centers()
    b       = cbf.barrier(centers)
    cells   = np.flatnonzero(b <= 0)
    if cells.size == 0:
        return cells
    acts    = grid.action_array()
    A       = acts.shape[0]
    states  = np.repeat(centers[cells], A, axis=0)
    b_next  = cbf.barrier(env.dynamics(states, np.tile(acts, (cells.size, 1)))).reshape(cells.size, A)
    ok      = (b_next - b[cells, None] <= -cbf.lam * b[cells, None]).any(axis=1)
    return cells[~ok]
