"""
feasible/feasibility.py

Constraint decay functions on a finite deterministic MDP.

    D^π F (x) = c(x) + (1 − c(x))·γ·F(f(x, π(x)))          per-policy operator
    D*  F (x) = c(x) + (1 − c(x))·γ·min_a F(f(x, a))        risky Bellman operator

Both are γ-contractions in the sup norm. Iterating from F₀ ≡ 0 every value is
exactly 0 or γ^N, so the iteration stops with a zero residual after at most
(longest finite steps-to-violation + 2) sweeps.

All sweeps are synchronous: each sweep reads only the previous iterate.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from feasible.errors import ConvergenceError
from feasible.mdp_core import (FiniteMdp, RegionMask, TabularField, TabularPolicy,
                               policy_successors, sweep)

logger = logging.getLogger(__name__)


class FixedPointConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    eps_fp:     float = Field(1e-12, gt=0)
    max_sweeps: int   = Field(100_000, ge=1)
    style:      Literal["synchronous"] = "synchronous"


@dataclass(frozen=True, eq=False)
class CdfSolution:
    """Converged CDF plus the sweep trace that produced it."""

    F:        TabularField
    sweeps:   int
    residual: float
    history:  List[float] = field(default_factory=list)
    # Argmin policy of the last sweep; only set by solve_risky_bellman
    policy:   Optional[TabularPolicy] = None

    def region(self, p: float) -> RegionMask:
        return extract_region(self.F, p)


def _check_cdf(F: TabularField, mdp: FiniteMdp) -> None:
    if F.kind != "cdf":
        raise ValueError(f"expected a CDF-tagged field, got kind={F.kind!r}")
    if len(F) != mdp.n_cells:
        raise ValueError(f"field has {len(F)} cells but the MDP has {mdp.n_cells}")


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

def apply_cdf_operator(mdp: FiniteMdp, policy: TabularPolicy, F: TabularField,
                       workers: Optional[int] = None) -> TabularField:
    """One synchronous application of D^π."""
    _check_cdf(F, mdp)
    c, f, g = mdp.c, F.values, mdp.gamma
    succ    = policy_successors(mdp, policy)

    def chunk(sl):
        return c[sl] + (1.0 - c[sl]) * g * f[succ[sl]]

    return TabularField(sweep(chunk, mdp.n_cells, workers), "cdf")


def apply_risky_operator(mdp: FiniteMdp, F: TabularField,
                         workers: Optional[int] = None) -> Tuple[TabularField, TabularPolicy]:
    """One synchronous application of D*, plus its argmin policy (ties → lowest index)."""
    _check_cdf(F, mdp)
    c, f, g = mdp.c, F.values, mdp.gamma

    def chunk(sl):
        G    = f[mdp.successor[sl]]
        best = np.argmin(G, axis=1)
        low  = G[np.arange(G.shape[0]), best]
        return c[sl] + (1.0 - c[sl]) * g * low, best

    values, actions = sweep(chunk, mdp.n_cells, workers)
    return TabularField(values, "cdf"), TabularPolicy(actions, mdp.n_actions)


# ---------------------------------------------------------------------------
# Fixed-point solvers
# ---------------------------------------------------------------------------

def _iterate(step: Callable[[TabularField], Tuple[TabularField, Optional[TabularPolicy]]],
             F0: TabularField, cfg: FixedPointConfig, label: str) -> CdfSolution:
    F, policy = F0, None
    history: List[float] = []
    for k in range(1, cfg.max_sweeps + 1):
        F_next, policy = step(F)
        r = F_next.sup_distance(F)
        history.append(r)
        F = F_next
        if r <= cfg.eps_fp:
            logger.debug("%s converged: %d sweeps, residual %.3g", label, k, r)
            return CdfSolution(F, k, r, history, policy)
    raise ConvergenceError(
        f"{label} did not reach residual {cfg.eps_fp:g} within {cfg.max_sweeps} sweeps "
        f"(last residual {history[-1]:.3g})",
        history=history,
    )


def identify_feasible_region(mdp: FiniteMdp, policy: TabularPolicy,
                             F0: Optional[TabularField] = None,
                             cfg: Optional[FixedPointConfig] = None,
                             workers: Optional[int] = None) -> CdfSolution:
    """
    F^π by iterating D^π from F0 (default ≡ 0) to sup-norm residual eps_fp.

    Raises:
        ConvergenceError: sweep budget exhausted; carries the residual history.
    """
    cfg = cfg or FixedPointConfig()
    F0  = F0 if F0 is not None else TabularField.zeros(mdp.n_cells, "cdf")
    _check_cdf(F0, mdp)
    sol = _iterate(lambda F: (apply_cdf_operator(mdp, policy, F, workers), None),
                   F0, cfg, "policy CDF")
    # The policy slot stays empty for per-policy solutions
    return CdfSolution(sol.F, sol.sweeps, sol.residual, sol.history, None)


def solve_risky_bellman(mdp: FiniteMdp, cfg: Optional[FixedPointConfig] = None,
                        workers: Optional[int] = None) -> CdfSolution:
    """F* by iterating D* from F₀ ≡ 0; the solution carries the argmin policy."""
    cfg = cfg or FixedPointConfig()
    sol = _iterate(lambda F: apply_risky_operator(mdp, F, workers),
                   TabularField.zeros(mdp.n_cells, "cdf"), cfg, "risky Bellman")
    logger.info("Risky Bellman on %s: %d sweeps, %d/%d cells at F* = 0",
                mdp.name, sol.sweeps, int((sol.F.values == 0).sum()), mdp.n_cells)
    return sol


# ---------------------------------------------------------------------------
# Regions and residuals
# ---------------------------------------------------------------------------

def extract_region(F: TabularField, p: float) -> RegionMask:
    """Thresholded feasible region {F < p}."""
    if not (0.0 < p < 1.0):
        raise ValueError(f"feasibility threshold p must lie in (0, 1), got {p}")
    return RegionMask(F.values < p)


def cdf_residual(mdp: FiniteMdp, policy: TabularPolicy, F: TabularField) -> float:
    """sup |F − D^π F|."""
    return F.sup_distance(apply_cdf_operator(mdp, policy, F, workers=1))


def risky_residual(mdp: FiniteMdp, F: TabularField) -> float:
    """sup |F − D* F|."""
    return F.sup_distance(apply_risky_operator(mdp, F, workers=1)[0])


def horizon_cap(gamma: float, eps_fp: float) -> int:
    """H = ⌈log_γ eps_fp⌉: beyond H steps γ^N falls below the tolerance."""
    if not (0.0 < gamma < 1.0) or eps_fp <= 0:
        raise ValueError(f"need 0 < gamma < 1 and eps_fp > 0, got {gamma}, {eps_fp}")
    if eps_fp >= 1.0:
        return 0
    return int(math.ceil(math.log(eps_fp) / math.log(gamma)))


def contraction_violations(history: List[float], gamma: float,
                           slack: float = 1e-9) -> List[int]:
    """Indices k >= 1 where r_k / r_{k-1} exceeds gamma + slack (zero residuals skipped)."""
    bad = []
    for k in range(1, len(history)):
        prev, cur = history[k - 1], history[k]
        if prev > 0 and cur / prev > gamma + slack:
            bad.append(k)
    return bad
