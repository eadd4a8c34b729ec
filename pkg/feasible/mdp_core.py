"""
feasible/mdp_core.py

Finite deterministic MDP abstraction, grid discretization of continuous
state/action spaces, and the tabular containers every solver operates on.

Discretization:
    cell centres   uniformly spaced nodes lower..upper (inclusive) per dimension
    flat index     C-order over dimensions (first dimension varies slowest)
    successor      nearest centre to f(centre, a) after clamping to the box,
                   ties → lowest flat index
    violation      c(cell) = 1  ⇔  any component of h(centre) > 0

All containers are frozen and their arrays read-only once built, so they can be
shared across sweep workers without copying.
"""

import itertools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np

from feasible.errors import NonFiniteModelError

logger = logging.getLogger(__name__)

# Below this many cells a sweep always runs inline.
_MIN_PARALLEL_CELLS = 4096


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Grid specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned uniform state grid plus an explicit list of action vectors."""

    lower:   Tuple[float, ...]
    upper:   Tuple[float, ...]
    cells:   Tuple[int, ...]
    actions: Tuple[Tuple[float, ...], ...]

    def __post_init__(self):
        lower   = tuple(float(v) for v in self.lower)
        upper   = tuple(float(v) for v in self.upper)
        cells   = tuple(int(v) for v in self.cells)
        actions = tuple(tuple(float(c) for c in np.atleast_1d(a)) for a in self.actions)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "actions", actions)

        if not (len(lower) == len(upper) == len(cells)) or not lower:
            raise ValueError(
                f"lower/upper/cells must have the same non-zero length, "
                f"got {len(lower)}/{len(upper)}/{len(cells)}"
            )
        for d, (lo, hi, n) in enumerate(zip(lower, upper, cells)):
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
                raise ValueError(f"dimension {d}: need finite lower < upper, got [{lo}, {hi}]")
            if n < 2:
                raise ValueError(f"dimension {d}: cell count must be >= 2, got {n}")
        if not actions:
            raise ValueError("action list must be non-empty")
        if len({len(a) for a in actions}) != 1:
            raise ValueError("all action vectors must have the same dimension")
        if len(set(actions)) != len(actions):
            raise ValueError("action list contains duplicates")

    @classmethod
    def from_bounds(cls, lower: Sequence[float], upper: Sequence[float],
                    cells: Sequence[int], actions: Sequence) -> "GridSpec":
        return cls(tuple(lower), tuple(upper), tuple(cells), tuple(actions))

    @property
    def ndim(self) -> int:
        return len(self.cells)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def spacing(self) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return (hi - lo) / (np.asarray(self.cells) - 1)

    def action_array(self) -> np.ndarray:
        """[A, m] array of action vectors in list order."""
        return np.asarray(self.actions, dtype=np.float64)

    def axes(self) -> list:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.cells)]

    def centers(self) -> np.ndarray:
        """[S, n] centre coordinates in flat-index order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def multi_index(self, cells) -> np.ndarray:
        """Flat cell index → [N, n] per-dimension indices."""
        return np.stack(np.unravel_index(np.asarray(cells), self.cells), axis=-1)

    def flat_index(self, multi) -> np.ndarray:
        multi = np.atleast_2d(np.asarray(multi, dtype=np.int64))
        return np.ravel_multi_index(tuple(multi.T), self.cells)

    def cell_of(self, points) -> np.ndarray:
        """
        Nearest cell centre for each point (Euclidean), after clamping to the
        bounding box. On a product grid the nearest centre is the per-axis
        nearest node; ceil(t - 0.5) sends exact midpoints to the lower node,
        which is also the lower flat index.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        lo  = np.asarray(self.lower)
        hi  = np.asarray(self.upper)
        n   = np.asarray(self.cells)
        t   = (np.clip(pts, lo, hi) - lo) / self.spacing
        idx = np.clip(np.ceil(t - 0.5), 0, n - 1).astype(np.int64)
        return np.ravel_multi_index(tuple(idx.T), self.cells)


def action_grid(lower: Sequence[float], upper: Sequence[float],
                counts: Sequence[int]) -> list:
    """Cartesian product of per-dimension uniformly spaced action values."""
    axes = [np.linspace(lo, hi, int(k)) if int(k) > 1 else np.array([(lo + hi) / 2.0])
            for lo, hi, k in zip(lower, upper, counts)]
    return [tuple(float(v) for v in combo) for combo in itertools.product(*axes)]


# ---------------------------------------------------------------------------
# Tabular containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """
    Finite deterministic MDP: successor[s, a], reward[s, a], violation[s].

    violation[s] is the flag c(s); gamma lies strictly inside (0, 1).
    grid is None for MDPs specified directly by tables.
    """

    successor:     np.ndarray
    reward:        np.ndarray
    violation:     np.ndarray
    gamma:         float
    initial_cells: np.ndarray
    grid:          Optional[GridSpec] = None
    name:          str = "custom"
    params:        Mapping = field(default_factory=dict)

    def __post_init__(self):
        succ = np.asarray(self.successor, dtype=np.int64)
        rew  = np.asarray(self.reward, dtype=np.float64)
        viol = np.asarray(self.violation).astype(bool)
        init = np.asarray(self.initial_cells, dtype=np.int64).ravel()

        if succ.ndim != 2 or succ.shape[0] == 0 or succ.shape[1] == 0:
            raise ValueError(f"successor table must be [S, A] with S, A >= 1, got {succ.shape}")
        S, A = succ.shape
        if rew.shape != (S, A):
            raise ValueError(f"reward table shape {rew.shape} != successor shape {(S, A)}")
        if viol.shape != (S,):
            raise ValueError(f"violation flags must have length {S}, got {viol.shape}")
        if succ.min() < 0 or succ.max() >= S:
            raise ValueError(f"successor indices must lie in [0, {S}), got [{succ.min()}, {succ.max()}]")
        if not np.all(np.isfinite(rew)):
            raise NonFiniteModelError("reward table contains non-finite entries")
        if not (0.0 < float(self.gamma) < 1.0):
            raise ValueError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        if init.size and (init.min() < 0 or init.max() >= S):
            raise ValueError("initial cells must be valid cell indices")
        if self.grid is not None and self.grid.n_cells != S:
            raise ValueError(f"grid has {self.grid.n_cells} cells but tables have {S}")

        object.__setattr__(self, "successor", _frozen(succ))
        object.__setattr__(self, "reward", _frozen(rew))
        object.__setattr__(self, "violation", _frozen(viol))
        object.__setattr__(self, "initial_cells", _frozen(init))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "params", dict(self.params))

    @classmethod
    def from_tables(cls, successor, reward, violation, gamma: float = 0.99,
                    initial_cells=None, name: str = "custom") -> "FiniteMdp":
        viol = np.asarray(violation).astype(bool)
        if initial_cells is None:
            initial_cells = np.flatnonzero(~viol)
        return cls(successor, reward, viol, gamma, initial_cells, None, name, {})

    @property
    def n_cells(self) -> int:
        return self.successor.shape[0]

    @property
    def n_actions(self) -> int:
        return self.successor.shape[1]

    @property
    def c(self) -> np.ndarray:
        """Violation flags as float64 0/1 for operator arithmetic."""
        return self.violation.astype(np.float64)


@dataclass(frozen=True, eq=False)
class TabularField:
    """One real value per cell; kind="cdf" fields are confined to [0, 1]."""

    values: np.ndarray
    kind:   Literal["cdf", "value"] = "value"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if self.kind not in ("cdf", "value"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.kind == "cdf":
            if not np.all(np.isfinite(vals)):
                raise ValueError("CDF field contains non-finite values")
            if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
                raise ValueError(
                    f"CDF field outside [0, 1]: min {vals.min():.6g}, max {vals.max():.6g}"
                )
        object.__setattr__(self, "values", _frozen(vals))

    @classmethod
    def zeros(cls, n_cells: int, kind: str = "value") -> "TabularField":
        return cls(np.zeros(n_cells), kind)

    def __len__(self) -> int:
        return self.values.size

    def sup_distance(self, other: "TabularField") -> float:
        return float(np.max(np.abs(self.values - other.values))) if len(self) else 0.0


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Deterministic tabular policy: one action index per cell."""

    actions:   np.ndarray
    n_actions: int

    def __post_init__(self):
        acts = np.asarray(self.actions, dtype=np.int64).ravel()
        if acts.size and (acts.min() < 0 or acts.max() >= self.n_actions):
            raise ValueError(f"policy actions must lie in [0, {self.n_actions})")
        object.__setattr__(self, "actions", _frozen(acts))
        object.__setattr__(self, "n_actions", int(self.n_actions))

    @classmethod
    def constant(cls, n_cells: int, n_actions: int, action: int = 0) -> "TabularPolicy":
        return cls(np.full(n_cells, action, dtype=np.int64), n_actions)

    @classmethod
    def random(cls, n_cells: int, n_actions: int,
               rng: np.random.Generator) -> "TabularPolicy":
        return cls(rng.integers(0, n_actions, size=n_cells), n_actions)

    def __len__(self) -> int:
        return self.actions.size

    def changed_cells(self, other: "TabularPolicy") -> np.ndarray:
        return np.flatnonzero(self.actions != other.actions)


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Boolean membership per cell."""

    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", _frozen(np.asarray(self.mask).astype(bool).ravel()))

    def __len__(self) -> int:
        return self.mask.size

    def count(self) -> int:
        return int(self.mask.sum())

    def cells(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def mismatches(self, other: "RegionMask") -> np.ndarray:
        return np.flatnonzero(self.mask != other.mask)

    def issubset(self, other: "RegionMask") -> bool:
        return not np.any(self.mask & ~other.mask)


# ---------------------------------------------------------------------------
# Sweep helper: per-cell work split into contiguous chunks
# ---------------------------------------------------------------------------

def worker_count() -> int:
    """Worker threads for sweeps, from FPI_WORKERS (default 1)."""
    raw = os.environ.get("FPI_WORKERS", "").strip()
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        logger.warning("Ignoring non-integer FPI_WORKERS=%r", raw)
        return 1


def sweep(fn: Callable[[slice], object], n_cells: int,
          workers: Optional[int] = None):
    """
    Apply fn to contiguous cell slices and concatenate the results in order.

    fn returns an array (or a tuple of arrays) for its slice. Each output
    element depends only on its own cell, so any worker count produces the
    same bits as a single inline call.
    """
    workers = worker_count() if workers is None else max(1, int(workers))
    if workers == 1 or n_cells < _MIN_PARALLEL_CELLS:
        return fn(slice(0, n_cells))

    bounds = np.linspace(0, n_cells, workers + 1).astype(np.int64)
    chunks = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, chunks))
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p) for p in zip(*parts))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------

def discretize(env, grid: GridSpec, gamma: float = 0.99,
               initial_cells=None) -> FiniteMdp:
    """
    Induce the finite deterministic MDP of `env` on `grid`.

    Args:
        env:           EnvironmentSpec (vectorized dynamics / reward / constraint)
        grid:          state grid and action list; state dimension must match env
        gamma:         discount stored on the result
        initial_cells: explicit initial-state cell set; defaults to X_cstr cells

    Raises:
        ValueError:          dimension mismatch between env and grid
        NonFiniteModelError: f, r or h produced NaN/inf (ill-posed parameters
                             or integration blow-up)
    """
    if grid.ndim != env.state_dim:
        raise ValueError(f"grid has {grid.ndim} dims but {env.name} state has {env.state_dim}")
    acts = grid.action_array()
    if acts.shape[1] != env.action_dim:
        raise ValueError(f"actions have {acts.shape[1]} dims but {env.name} expects {env.action_dim}")

    centers = grid.centers()
    S, A    = centers.shape[0], acts.shape[0]
    states  = np.repeat(centers, A, axis=0)          # [S*A, n]  cell-major
    actions = np.tile(acts, (S, 1))                  # [S*A, m]

    nxt = np.asarray(env.dynamics(states, actions), dtype=np.float64)
    rew = np.asarray(env.reward(states, actions), dtype=np.float64)
    h   = np.asarray(env.constraint(centers), dtype=np.float64).reshape(S, -1)

    for label, arr in (("dynamics", nxt), ("reward", rew), ("constraint", h)):
        bad = ~np.isfinite(arr)
        if bad.any():
            rows = np.flatnonzero(bad.reshape(bad.shape[0], -1).any(axis=1))
            raise NonFiniteModelError(
                f"{env.name}: non-finite {label} output at {rows.size} evaluation(s), "
                f"first row {int(rows[0])}"
            )

    successor = grid.cell_of(nxt).reshape(S, A)
    violation = (h > 0).any(axis=1)
    if initial_cells is None:
        initial_cells = np.flatnonzero(~violation)

    params = {**dict(env.params), "gamma": float(gamma)}
    mdp = FiniteMdp(successor, rew.reshape(S, A), violation, gamma,
                    initial_cells, grid, env.name, params)
    logger.info("Discretized %s: %d cells x %d actions, %d violating",
                env.name, S, A, int(violation.sum()))
    return mdp


def constraint_indicator(mdp: FiniteMdp) -> RegionMask:
    """X_cstr: cells where the constraint holds (h <= 0, i.e. c = 0)."""
    return RegionMask(~mdp.violation)


def rollout(mdp: FiniteMdp, policy: TabularPolicy, cells, steps: int) -> np.ndarray:
    """[steps + 1, N] cell trajectories of `policy` from each start cell."""
    cur   = np.asarray(cells, dtype=np.int64).ravel()
    trace = np.empty((steps + 1, cur.size), dtype=np.int64)
    trace[0] = cur
    for t in range(steps):
        cur = mdp.successor[cur, policy.actions[cur]]
        trace[t + 1] = cur
    return trace


def policy_successors(mdp: FiniteMdp, policy: TabularPolicy) -> np.ndarray:
    return mdp.successor[np.arange(mdp.n_cells), policy.actions]


def policy_rewards(mdp: FiniteMdp, policy: TabularPolicy) -> np.ndarray:
    return mdp.reward[np.arange(mdp.n_cells), policy.actions]


def describe(mdp: FiniteMdp) -> Dict[str, object]:
    """Small header dict used in artifacts and logs."""
    out = {"name": mdp.name, "cells": mdp.n_cells, "actions": mdp.n_actions,
           "gamma": mdp.gamma, "violating": int(mdp.violation.sum())}
    if mdp.grid is not None:
        out.update(lower=list(mdp.grid.lower), upper=list(mdp.grid.upper),
                   grid=list(mdp.grid.cells))
    return out
