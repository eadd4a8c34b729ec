"""
feasible/planning.py

Policy evaluation, region-wise policy improvement (exact and log-barrier),
the feasible Bellman solver and the outer feasible policy iteration loop.

Conventions:
    V on violating cells        absorbing with reward 0, so V = 0 there
    value tolerance eps_v       bounds |V − V_true|; sweeps stop once the
                                sup-norm change is <= eps_v·(1 − γ)/4
    incumbent stability         a cell keeps its current action while that
                                action scores within eps_v/2 of the best
    admissible successors       the closed core of {F < p}: the largest part
                                of the region every member of which can stay
                                inside it
    convergence                 one full iteration with no policy change
"""

import logging
from typing import Any, Callable, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from feasible.errors import ConvergenceError, InconsistentInputError
from feasible.feasibility import (FixedPointConfig, extract_region,
                                  identify_feasible_region)
from feasible.mdp_core import (FiniteMdp, RegionMask, TabularField, TabularPolicy,
                               policy_rewards, policy_successors, rollout, sweep)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration and report schemas
# ---------------------------------------------------------------------------

class ImprovementConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode:             Literal["exact", "barrier"] = "exact"
    p:                float = Field(0.1, gt=0, lt=1)
    t0:               float = Field(1.0, gt=0)
    t_factor:         float = Field(1.1, gt=1)
    t_period:         int   = Field(1, ge=1)
    eps_v:            float = Field(1e-9, gt=0)
    max_eval_sweeps:  int   = Field(200_000, ge=1)
    # None → S·A + 1
    max_iterations:   Optional[int] = Field(None, ge=1)

    def value_stop(self, gamma: float) -> float:
        """Sweep-to-sweep change at which value iteration stops."""
        return self.eps_v * (1.0 - gamma) / 4.0

    @property
    def keep_margin(self) -> float:
        return self.eps_v / 2.0


class IterationRecord(BaseModel):
    iteration:             int
    region_size:           int
    policy_changes:        int
    delta_f_sup:           Optional[float] = None   # sup |F_k − F_{k−1}|
    delta_f_max:           Optional[float] = None   # max (F_k − F_{k−1})
    delta_v_min_on_region: Optional[float] = None   # min over previous region of V_k − V_{k−1}
    band_cells:            int = 0
    region_lost_cells:     int = 0
    t:                     Optional[float] = None
    eval_sweeps:           int
    cdf_sweeps:            int
    converged:             bool = False


class FpiReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    env:               str
    mode:              str
    iterations:        List[IterationRecord] = Field(default_factory=list)
    converged:         bool = False
    iterations_used:   int = 0
    final_region_size: int = 0

    # Final artifacts travel with the report but are written as CSV, not JSON
    F:      Optional[Any] = Field(None, exclude=True)
    V:      Optional[Any] = Field(None, exclude=True)
    policy: Optional[Any] = Field(None, exclude=True)
    region: Optional[Any] = Field(None, exclude=True)


class RolloutAudit(BaseModel):
    horizon:          int
    start_cells:      int
    violating_starts: List[int] = Field(default_factory=list)
    first_violation:  List[int] = Field(default_factory=list)   # aligned with violating_starts

    @property
    def passed(self) -> bool:
        return not self.violating_starts


# ---------------------------------------------------------------------------
# Tabular lookups
# ---------------------------------------------------------------------------

def _raw(field) -> np.ndarray:
    return field.values if isinstance(field, TabularField) else np.asarray(field)


def action_values(mdp: FiniteMdp, V, cells=slice(None)) -> np.ndarray:
    """Q(x, a) = r(x, a) + γ·V(f(x, a)) for `cells`, shape [len(cells), A]."""
    return mdp.reward[cells] + mdp.gamma * _raw(V)[mdp.successor[cells]]


def action_cdf(mdp: FiniteMdp, F, cells=slice(None)) -> np.ndarray:
    """G(x, a) = F(f(x, a)) for `cells`, shape [len(cells), A]."""
    return _raw(F)[mdp.successor[cells]]


def barrier_t(cfg: ImprovementConfig, iteration: int) -> float:
    """t₀·factor^⌊iteration / period⌋."""
    return cfg.t0 * cfg.t_factor ** (iteration // cfg.t_period)


# ---------------------------------------------------------------------------
# Policy evaluation
# ---------------------------------------------------------------------------

def _floored(stop: float, v: np.ndarray) -> float:
    """Stopping change, floored a few ulps above the largest magnitude in v."""
    return max(stop, 4.0 * float(np.spacing(np.max(np.abs(v))))) if v.size else stop


def _evaluate(mdp: FiniteMdp, policy: TabularPolicy, cfg: ImprovementConfig,
              workers: Optional[int]) -> Tuple[TabularField, int, List[float]]:
    succ = policy_successors(mdp, policy)
    rew  = np.where(mdp.violation, 0.0, policy_rewards(mdp, policy))
    live = ~mdp.violation
    g    = mdp.gamma
    stop = cfg.value_stop(g)
    v    = np.zeros(mdp.n_cells)
    history: List[float] = []

    for k in range(1, cfg.max_eval_sweeps + 1):
        prev = v

        def chunk(sl):
            return np.where(live[sl], rew[sl] + g * prev[succ[sl]], 0.0)

        v = sweep(chunk, mdp.n_cells, workers)
        r = float(np.max(np.abs(v - prev))) if v.size else 0.0
        history.append(r)
        if r <= _floored(stop, v):
            return TabularField(v, "value"), k, history
    raise ConvergenceError(
        f"policy evaluation did not reach change {stop:.3g} within {cfg.max_eval_sweeps} sweeps",
        history=history,
    )


def evaluate_policy(mdp: FiniteMdp, policy: TabularPolicy,
                    cfg: Optional[ImprovementConfig] = None,
                    workers: Optional[int] = None) -> TabularField:
    """
    V^π by synchronous iteration from V₀ ≡ 0.

    Raises:
        ConvergenceError: sweep budget exhausted.
    """
    V, _, _ = _evaluate(mdp, policy, cfg or ImprovementConfig(), workers)
    return V


# ---------------------------------------------------------------------------
# Policy improvement
# ---------------------------------------------------------------------------

def _pick(scores: np.ndarray, incumbent: np.ndarray, margin: float) -> np.ndarray:
    """Row argmax (lowest index on ties) unless the incumbent is within margin of it."""
    rows = np.arange(scores.shape[0])
    best = np.argmax(scores, axis=1)
    top  = scores[rows, best]
    inc  = scores[rows, incumbent]
    keep = np.isfinite(inc) & (inc >= top - margin)
    return np.where(keep, incumbent, best)


def closed_core(mdp: FiniteMdp, inside: np.ndarray) -> np.ndarray:
    """
    Largest subset of the non-violating cells of `inside` in which every cell
    has an action whose successor stays in the subset.
    """
    core = np.asarray(inside, dtype=bool) & ~mdp.violation
    while True:
        kept = core & core[mdp.successor].any(axis=1)
        if np.array_equal(kept, core):
            return core
        core = kept


def _improve(mdp: FiniteMdp, policy: TabularPolicy, F: TabularField, V: TabularField,
             cfg: ImprovementConfig, t: Optional[float],
             workers: Optional[int]) -> Tuple[TabularPolicy, np.ndarray]:
    """
    Region-wise improvement; t=None selects the exact constrained argmax,
    a finite t the log-barrier objective.

    Admissible successors are the closed core of {F < p}. On converged
    per-policy CDFs whose region is the zero set the core is the whole
    region. Region cells outside the core (boundary band) take the
    out-of-region rule. Returns the new policy and the band cells.
    """
    f, v   = F.values, V.values
    g, p   = mdp.gamma, cfg.p
    pol    = policy.actions
    viol   = mdp.violation
    margin = cfg.keep_margin
    region = f < p
    core   = closed_core(mdp, region)

    def chunk(sl):
        succ = mdp.successor[sl]
        G    = action_cdf(mdp, f, sl)
        Q    = action_values(mdp, v, sl)
        inc  = pol[sl]

        admissible = core[succ]
        if t is None:
            score = np.where(admissible, Q, -np.inf)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                score = np.where(admissible, Q + np.log(np.where(admissible, p - G, 1.0)) / t,
                                 -np.inf)
        inside = _pick(score, inc, margin)

        # Out-of-region rule: min G, then higher Q, then lowest index
        g_min   = G.min(axis=1, keepdims=True)
        q_tied  = np.where(G == g_min, Q, -np.inf)
        outside = _pick(q_tied, inc, margin)

        chosen = np.where(core[sl], inside, outside)
        return np.where(viol[sl], inc, chosen)

    actions    = sweep(chunk, mdp.n_cells, workers)
    band_cells = np.flatnonzero(region & ~viol & ~core)

    if band_cells.size:
        # Consistent inputs give F(x) = γ·F(incumbent successor), so F(x) < γp
        # guarantees at least one successor inside {F < p}
        suspicious = band_cells[f[band_cells] + 1e-12 < g * p]
        stranded   = suspicious[~region[mdp.successor[suspicious]].any(axis=1)]
        if stranded.size:
            raise InconsistentInputError(
                f"{stranded.size} in-region cell(s) have no action with F(successor) < {p} "
                f"(first cell {int(stranded[0])}); F/V do not belong to the incumbent policy"
            )
        logger.debug("%d boundary-band cell(s) handled by the out-of-region rule", band_cells.size)

    return TabularPolicy(actions, mdp.n_actions), band_cells


def improve_region_wise(mdp: FiniteMdp, policy_k: TabularPolicy, F_k: TabularField,
                        V_k: TabularField, cfg: Optional[ImprovementConfig] = None,
                        workers: Optional[int] = None) -> TabularPolicy:
    """
    Inside {F_k < p}: argmax of Q over actions whose successor stays in the
    closed core of {F_k < p}. Outside (and on band cells): argmin of
    F_k(successor), ties by higher Q then lowest index.

    Raises:
        InconsistentInputError: an in-region cell has no admissible action.
    """
    new_policy, _ = _improve(mdp, policy_k, F_k, V_k, cfg or ImprovementConfig(), None, workers)
    return new_policy


def improve_barrier(mdp: FiniteMdp, policy_k: TabularPolicy, F_k: TabularField,
                    V_k: TabularField, cfg: Optional[ImprovementConfig] = None,
                    t: Optional[float] = None,
                    workers: Optional[int] = None) -> TabularPolicy:
    """Log-barrier improvement: maximize Q + (1/t)·log(p − F_k(successor)) in-region."""
    cfg = cfg or ImprovementConfig(mode="barrier")
    t   = cfg.t0 if t is None else float(t)
    if t <= 0:
        raise ValueError(f"barrier parameter t must be positive, got {t}")
    new_policy, _ = _improve(mdp, policy_k, F_k, V_k, cfg, t, workers)
    return new_policy


# ---------------------------------------------------------------------------
# Feasible policy iteration
# ---------------------------------------------------------------------------

IterationHook = Callable[[int, TabularField, TabularField, RegionMask, TabularPolicy], None]


def run_fpi(mdp: FiniteMdp, policy_0: TabularPolicy,
            cfg: Optional[ImprovementConfig] = None,
            fixed_point: Optional[FixedPointConfig] = None,
            on_iteration: Optional[IterationHook] = None,
            workers: Optional[int] = None) -> FpiReport:
    """
    Alternate {evaluate V; identify F; improve} until the policy is unchanged
    for a full iteration.

    Args:
        mdp:          finite MDP
        policy_0:     initial policy (arbitrary)
        cfg:          improvement / evaluation settings
        fixed_point:  CDF solver settings
        on_iteration: called as hook(k, F_k, V_k, region_k, policy_k) after
                      each evaluation (per-iteration dumps)

    Raises:
        ConvergenceError: iteration cap exceeded; the partial report is attached.
    """
    cfg         = cfg or ImprovementConfig()
    fixed_point = fixed_point or FixedPointConfig()
    max_iter    = cfg.max_iterations or mdp.n_cells * mdp.n_actions + 1
    report      = FpiReport(env=mdp.name, mode=cfg.mode)

    policy = policy_0
    prev: Optional[Tuple[TabularField, TabularField, RegionMask]] = None

    for k in range(max_iter):
        V, eval_sweeps, _ = _evaluate(mdp, policy, cfg, workers)
        cdf    = identify_feasible_region(mdp, policy, None, fixed_point, workers)
        F      = cdf.F
        region = extract_region(F, cfg.p)
        t      = barrier_t(cfg, k) if cfg.mode == "barrier" else None

        new_policy, band = _improve(mdp, policy, F, V, cfg, t, workers)
        changes = int(new_policy.changed_cells(policy).size)

        record = IterationRecord(iteration=k, region_size=region.count(),
                                 policy_changes=changes, band_cells=int(band.size), t=t,
                                 eval_sweeps=eval_sweeps, cdf_sweeps=cdf.sweeps,
                                 converged=changes == 0)
        if prev is not None:
            F_prev, V_prev, region_prev = prev
            diff = F.values - F_prev.values
            record.delta_f_sup = float(np.max(np.abs(diff)))
            record.delta_f_max = float(np.max(diff))
            if region_prev.count():
                record.delta_v_min_on_region = float(
                    np.min((V.values - V_prev.values)[region_prev.mask]))
            lost = region_prev.mask & ~region.mask
            record.region_lost_cells = int(lost.sum())
            if record.region_lost_cells:
                logger.warning("Iteration %d: %d cell(s) left the feasible region (first %s)",
                               k, record.region_lost_cells, np.flatnonzero(lost)[:5].tolist())
        report.iterations.append(record)

        logger.info("FPI %s iter %d: region %d/%d, %d policy change(s), %d band cell(s)",
                    mdp.name, k, record.region_size, mdp.n_cells, changes, band.size)
        if on_iteration is not None:
            on_iteration(k, F, V, region, policy)

        if record.converged:
            report.converged         = True
            report.iterations_used   = k + 1
            report.final_region_size = region.count()
            report.F, report.V, report.policy, report.region = F, V, policy, region
            return report

        prev, policy = (F, V, region), new_policy

    report.iterations_used = max_iter
    raise ConvergenceError(f"FPI did not converge within {max_iter} iterations", report=report)


# ---------------------------------------------------------------------------
# Feasible Bellman equation
# ---------------------------------------------------------------------------

def _restricted_actions(mdp: FiniteMdp, region: RegionMask) -> np.ndarray:
    """[S, A] mask of actions keeping the successor inside region."""
    return region.mask[mdp.successor]


def solve_feasible_bellman(mdp: FiniteMdp, region_star: RegionMask,
                           cfg: Optional[ImprovementConfig] = None,
                           workers: Optional[int] = None) -> Tuple[TabularField, TabularPolicy]:
    """
    Value iteration with actions restricted to successors inside region_star.

    Returns V* (NaN outside region_star) and the greedy policy (action 0
    outside region_star, lowest index on ties).

    Raises:
        InconsistentInputError: region_star is empty or some member cell has
                                no action staying inside it.
        ConvergenceError:       sweep budget exhausted.
    """
    cfg   = cfg or ImprovementConfig()
    cells = region_star.cells()
    if cells.size == 0:
        raise InconsistentInputError("feasible Bellman needs a non-empty region")
    allowed = _restricted_actions(mdp, region_star)
    stranded = cells[~allowed[cells].any(axis=1)]
    if stranded.size:
        raise InconsistentInputError(
            f"{stranded.size} region cell(s) have no action staying in the region "
            f"(first cell {int(stranded[0])})"
        )

    g     = mdp.gamma
    stop  = cfg.value_stop(g)
    mask  = region_star.mask
    v     = np.zeros(mdp.n_cells)

    def backup(values, sl):
        q = action_values(mdp, values, sl)
        q = np.where(allowed[sl], q, -np.inf)
        best = np.argmax(q, axis=1)
        return np.where(mask[sl], q[np.arange(q.shape[0]), best], 0.0), best

    history: List[float] = []
    for k in range(1, cfg.max_eval_sweeps + 1):
        prev = v
        v, greedy = sweep(lambda sl: backup(prev, sl), mdp.n_cells, workers)
        r = float(np.max(np.abs(v - prev)))
        history.append(r)
        if r <= _floored(stop, v):
            break
    else:
        raise ConvergenceError(
            f"feasible Bellman did not reach change {stop:.3g} within {cfg.max_eval_sweeps} sweeps",
            history=history,
        )

    logger.info("Feasible Bellman on %s: %d sweeps over %d region cells",
                mdp.name, k, cells.size)
    values = np.where(mask, v, np.nan)
    greedy = np.where(mask, greedy, 0)
    return TabularField(values, "value"), TabularPolicy(greedy, mdp.n_actions)


def feasible_bellman_residual(mdp: FiniteMdp, V: TabularField, region: RegionMask) -> float:
    """sup over region cells of |V − max_{a: f(x,a) ∈ region} Q(x, a)|."""
    cells = region.cells()
    if cells.size == 0:
        return 0.0
    allowed = _restricted_actions(mdp, region)[cells]
    vals    = np.where(region.mask, V.values, 0.0)
    q       = np.where(allowed, action_values(mdp, vals, cells), -np.inf)
    return float(np.max(np.abs(V.values[cells] - q.max(axis=1))))


def rollout_audit(mdp: FiniteMdp, policy: TabularPolicy, region: RegionMask,
                  horizon: int = 200) -> RolloutAudit:
    """Roll out policy from every region cell for horizon steps; report starts that violate."""
    starts = region.cells()
    audit  = RolloutAudit(horizon=horizon, start_cells=int(starts.size))
    if starts.size == 0:
        return audit
    hit = mdp.violation[rollout(mdp, policy, starts, horizon)]   # [H + 1, N]
    bad = np.flatnonzero(hit.any(axis=0))
    audit.violating_starts = starts[bad].tolist()
    audit.first_violation  = np.argmax(hit[:, bad], axis=0).tolist()
    if bad.size:
        logger.warning("Rollout audit: %d of %d region cell(s) reach a violation within %d steps",
                       bad.size, starts.size, horizon)
    return audit
