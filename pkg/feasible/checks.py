"""
feasible/checks.py

Invariant suite shared by `fpi.py verify`, the post-solve audit of
`fpi.py solve` and the tests.

Random-MDP checks (verify):
    oracle_equivalence      {F* < p} equals the viability kernel
    exhaustive_optimality   F* equals the pointwise min over all policies
    self_consistency        per-policy CDF residual and contraction ratios
    rollout_consistency     F^π against exact steps-to-violation
    dominance               F* <= F^π for sampled policies
    operator_monotonicity   F <= G implies D F <= D G (both operators)
    policy_evaluation       V^π against a direct linear solve
    fpi_monotonicity        CDF decrease, region growth, value increase
    fpi_fixed_point         risky / feasible Bellman residuals at convergence
    safety_audit            converged policy never leaves its region
    barrier_feasibility     barrier choices stay below the threshold
    kernel_properties       kernel closure and anti-monotonicity in hazards
"""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field

from feasible.artifacts import dump_mdp_table
from feasible.errors import FpiError
from feasible.feasibility import (FixedPointConfig, apply_cdf_operator,
                                  apply_risky_operator, cdf_residual,
                                  contraction_violations, extract_region,
                                  horizon_cap, identify_feasible_region,
                                  risky_residual, solve_risky_bellman)
from feasible.mdp_core import FiniteMdp, RegionMask, TabularField, TabularPolicy
from feasible.oracle import (NEVER, enumerate_optimal_cdf, random_finite_mdp,
                             steps_to_violation, viability_kernel)
from feasible.planning import (FpiReport, ImprovementConfig, evaluate_policy,
                               feasible_bellman_residual, improve_barrier,
                               rollout_audit, run_fpi, solve_feasible_bellman)

logger = logging.getLogger(__name__)

CHECK_NAMES = [
    "oracle_equivalence", "exhaustive_optimality", "self_consistency",
    "rollout_consistency", "dominance", "operator_monotonicity",
    "policy_evaluation", "fpi_monotonicity", "fpi_fixed_point",
    "safety_audit", "barrier_feasibility", "kernel_properties",
]

# Exhaustive enumeration runs on its own smaller MDPs
EXHAUSTIVE_MDPS   = 25
EXHAUSTIVE_CELLS  = 6
EXHAUSTIVE_ACTIONS = 2


class CheckResult(BaseModel):
    name:          str
    cases:         int = 0
    failures:      int = 0
    first_failure: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.failures == 0


class VerifyReport(BaseModel):
    seed:             int
    n_mdps:           int
    checks:           List[CheckResult] = Field(default_factory=list)
    failure_artifact: Optional[str] = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


class RunAudit(BaseModel):
    """Post-solve checks on one FPI run."""

    env:                 str
    checks:              List[CheckResult] = Field(default_factory=list)
    kernel_size:         int = 0
    kernel_mismatches:   int = 0
    kernel_agreement:    float = 1.0
    band_cells_total:    int = 0
    rollout_horizon:     int = 0
    rollout_violations:  int = 0
    cbf_cells:           Optional[int] = None
    cbf_outside_region:  Optional[int] = None
    cbf_counterexamples: Optional[int] = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


class _Tally:
    """Accumulates pass/fail per check and remembers the first offending MDP."""

    def __init__(self, names: List[str], dump_dir: Optional[Path] = None,
                 header: Optional[Mapping] = None):
        self.results  = {n: CheckResult(name=n) for n in names}
        self.dump_dir = dump_dir
        self.header   = dict(header or {})
        self.artifact: Optional[str] = None

    def record(self, name: str, ok: bool, detail: str = "",
               mdp: Optional[FiniteMdp] = None) -> bool:
        res = self.results[name]
        res.cases += 1
        if ok:
            return True
        res.failures += 1
        if res.first_failure is None:
            res.first_failure = detail
            logger.warning("check %s failed: %s", name, detail)
        if self.artifact is None and mdp is not None and self.dump_dir is not None:
            path = self.dump_dir / f"failure_{name}.csv"
            dump_mdp_table(mdp, path, {**self.header, "check": name, "detail": detail})
            self.artifact = str(path)
        return False

    def guard(self, name: str, mdp: FiniteMdp, fn) -> None:
        """Run fn(); a solver exception counts as a failure of `name`."""
        try:
            fn()
        except FpiError as exc:
            self.record(name, False, f"{type(exc).__name__}: {exc}", mdp)


# ── Single-MDP checks ────────────────────────────────────────────────────────

def check_oracle_equivalence(mdp: FiniteMdp, p: float, fp: FixedPointConfig) -> np.ndarray:
    """Cells where {F* < p} and the viability kernel disagree."""
    star = solve_risky_bellman(mdp, fp)
    return extract_region(star.F, p).mismatches(viability_kernel(mdp))


def check_self_consistency(mdp: FiniteMdp, policy: TabularPolicy, fp: FixedPointConfig,
                           inject_fault: bool = False) -> Optional[str]:
    sol = identify_feasible_region(mdp, policy, None, fp)
    F   = sol.F
    if inject_fault:
        vals = F.values.copy()
        vals[0] = vals[0] - 0.25 if vals[0] >= 0.5 else vals[0] + 0.25
        F = TabularField(vals, "cdf")
    res = cdf_residual(mdp, policy, F)
    if res > fp.eps_fp:
        return f"CDF residual {res:.3g} > {fp.eps_fp:g}"
    bad = contraction_violations(sol.history, mdp.gamma)
    if bad:
        k = bad[0]
        return f"residual ratio {sol.history[k] / sol.history[k - 1]:.12f} > gamma at sweep {k}"
    return None


def check_rollout_consistency(mdp: FiniteMdp, policy: TabularPolicy,
                              fp: FixedPointConfig) -> Optional[str]:
    F     = identify_feasible_region(mdp, policy, None, fp).F.values
    steps = steps_to_violation(mdp, policy)
    H     = horizon_cap(mdp.gamma, fp.eps_fp)
    tol   = fp.eps_fp / (1.0 - mdp.gamma)
    finite = (steps != NEVER) & (steps <= H)
    err = np.abs(F[finite] - mdp.gamma ** steps[finite].astype(np.float64))
    if err.size and err.max() > tol:
        cell = int(np.flatnonzero(finite)[np.argmax(err)])
        return f"cell {cell}: F={F[cell]:.12g} vs gamma^{int(steps[cell])}"
    safe = steps == NEVER
    if safe.any() and F[safe].max() > mdp.gamma ** H + tol:
        return f"oracle-feasible cell has F={F[safe].max():.3g}"
    return None


def check_operator_monotonicity(mdp: FiniteMdp, policy: TabularPolicy,
                                rng: np.random.Generator) -> Optional[str]:
    lo = rng.random(mdp.n_cells)
    hi = np.minimum(1.0, lo + rng.random(mdp.n_cells) * 0.5)
    F, G = TabularField(lo, "cdf"), TabularField(hi, "cdf")
    if np.any(apply_cdf_operator(mdp, policy, F).values > apply_cdf_operator(mdp, policy, G).values):
        return "per-policy operator not monotone"
    if np.any(apply_risky_operator(mdp, F)[0].values > apply_risky_operator(mdp, G)[0].values):
        return "risky operator not monotone"
    return None


def check_policy_evaluation(mdp: FiniteMdp, policy: TabularPolicy,
                            cfg: ImprovementConfig) -> Optional[str]:
    """V^π against (I − γP)V = r on live cells, V = 0 on violating cells."""
    S    = mdp.n_cells
    live = ~mdp.violation
    P    = np.zeros((S, S))
    P[np.arange(S), mdp.successor[np.arange(S), policy.actions]] = 1.0
    P[~live] = 0.0
    r = np.where(live, mdp.reward[np.arange(S), policy.actions], 0.0)
    exact = np.linalg.solve(np.eye(S) - mdp.gamma * P, r)
    V = evaluate_policy(mdp, policy, cfg).values
    err = float(np.max(np.abs(V - exact)))
    return None if err <= cfg.eps_v else f"evaluation error {err:.3g} > {cfg.eps_v:g}"


def fpi_trace_problems(report: FpiReport, gamma: float, cfg: ImprovementConfig,
                       fp: FixedPointConfig) -> List[str]:
    """Per-iteration CDF decrease, region growth and value increase."""
    f_tol = 2.0 * fp.eps_fp / (1.0 - gamma)
    v_tol = 2.0 * cfg.eps_v / (1.0 - gamma)
    problems = []
    sizes = [r.region_size for r in report.iterations]
    for rec in report.iterations[1:]:
        k = rec.iteration
        if rec.delta_f_max is not None and rec.delta_f_max > f_tol:
            problems.append(f"iteration {k}: F increased by {rec.delta_f_max:.3g}")
        if rec.region_lost_cells:
            problems.append(f"iteration {k}: {rec.region_lost_cells} cell(s) left the region")
        if rec.delta_v_min_on_region is not None and rec.delta_v_min_on_region < -v_tol:
            problems.append(f"iteration {k}: V dropped by {-rec.delta_v_min_on_region:.3g}")
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        problems.append(f"region sizes not nondecreasing: {sizes}")
    return problems


def fpi_fixed_point_problems(mdp: FiniteMdp, report: FpiReport, cfg: ImprovementConfig,
                             fp: FixedPointConfig) -> List[str]:
    """Risky Bellman residual of F, feasible Bellman residual of V, cross-solver agreement."""
    problems = []
    F, V, region = report.F, report.V, report.region
    r_f = risky_residual(mdp, F)
    if r_f > fp.eps_fp:
        problems.append(f"risky Bellman residual {r_f:.3g} > {fp.eps_fp:g}")
    if region.count():
        r_v = feasible_bellman_residual(mdp, V, region)
        if r_v > cfg.eps_v:
            problems.append(f"feasible Bellman residual {r_v:.3g} > {cfg.eps_v:g}")
        V_star, _ = solve_feasible_bellman(mdp, region, cfg)
        gap = float(np.max(np.abs(V.values[region.mask] - V_star.values[region.mask])))
        if gap > 2.0 * cfg.eps_v:
            problems.append(f"FPI value differs from feasible Bellman solve by {gap:.3g}")
    return problems


def barrier_choice_violations(mdp: FiniteMdp, policy: TabularPolicy, F: TabularField,
                              V: TabularField, cfg: ImprovementConfig, t: float) -> np.ndarray:
    """In-region cells with an admissible incumbent whose barrier choice has F(successor) >= p."""
    new   = improve_barrier(mdp, policy, F, V, cfg, t=t)
    cells = np.arange(mdp.n_cells)
    f     = F.values
    inc_ok = f[mdp.successor[cells, policy.actions]] < cfg.p
    scope  = (f < cfg.p) & ~mdp.violation & inc_ok
    chosen = f[mdp.successor[cells, new.actions]]
    return np.flatnonzero(scope & (chosen >= cfg.p))


def kernel_problems(mdp: FiniteMdp, rng: np.random.Generator) -> Optional[str]:
    kernel = viability_kernel(mdp)
    cells  = kernel.cells()
    closed = kernel.mask[mdp.successor[cells]].any(axis=1)
    if not closed.all():
        return f"kernel cell {int(cells[~closed][0])} has no action staying in the kernel"
    safe = np.flatnonzero(~mdp.violation)
    if safe.size:
        extra = mdp.violation.copy()
        extra[rng.choice(safe)] = True
        harder = FiniteMdp.from_tables(mdp.successor, mdp.reward, extra, mdp.gamma)
        if not viability_kernel(harder).issubset(kernel):
            return "adding a hazard grew the kernel"
    return None


# ── Verify suite ─────────────────────────────────────────────────────────────

def run_verify_suite(n_mdps: int = 100, seed: int = 0, p: float = 0.1,
                     gamma: float = 0.99, eps_fp: float = 1e-12, eps_v: float = 1e-9,
                     inject_fault: bool = False,
                     dump_dir: Optional[Path] = None,
                     header: Optional[Mapping] = None) -> VerifyReport:
    """
    Run every check on n_mdps random MDPs (<= 12 cells, <= 4 actions) plus
    the exhaustive-optimality MDPs (<= 6 cells, 2 actions), all from `seed`.

    inject_fault corrupts one CDF value before the first self-consistency
    check; that check must then fail. `header` is copied into the dump of
    the first offending MDP.
    """
    rng   = np.random.default_rng(seed)
    fp    = FixedPointConfig(eps_fp=eps_fp)
    cfg   = ImprovementConfig(p=p, eps_v=eps_v)
    bcfg  = ImprovementConfig(mode="barrier", p=p, eps_v=eps_v)
    tally = _Tally(CHECK_NAMES, Path(dump_dir) if dump_dir is not None else None, header)
    tol   = eps_fp / (1.0 - gamma)

    for i in range(n_mdps):
        mdp = random_finite_mdp(rng, gamma=gamma)
        pi  = TabularPolicy.random(mdp.n_cells, mdp.n_actions, rng)

        def oracle():
            bad = check_oracle_equivalence(mdp, p, fp)
            tally.record("oracle_equivalence", bad.size == 0,
                         f"mdp {i}: {bad.size} mismatching cell(s), first {bad[:1].tolist()}", mdp)

        def consistency():
            err = check_self_consistency(mdp, pi, fp, inject_fault and i == 0)
            tally.record("self_consistency", err is None, f"mdp {i}: {err}", mdp)
            err = check_rollout_consistency(mdp, pi, fp)
            tally.record("rollout_consistency", err is None, f"mdp {i}: {err}", mdp)

        def dominance():
            star = solve_risky_bellman(mdp, fp).F.values
            for _ in range(5):
                sample = TabularPolicy.random(mdp.n_cells, mdp.n_actions, rng)
                F_pi   = identify_feasible_region(mdp, sample, None, fp).F.values
                gap    = float(np.max(star - F_pi))
                if not tally.record("dominance", gap <= tol,
                                    f"mdp {i}: F* exceeds F^pi by {gap:.3g}", mdp):
                    break

        def monotone():
            err = check_operator_monotonicity(mdp, pi, rng)
            tally.record("operator_monotonicity", err is None, f"mdp {i}: {err}", mdp)

        def evaluation():
            err = check_policy_evaluation(mdp, pi, cfg)
            tally.record("policy_evaluation", err is None, f"mdp {i}: {err}", mdp)

        def fpi():
            report = run_fpi(mdp, pi, cfg, fp)
            problems = fpi_trace_problems(report, gamma, cfg, fp)
            tally.record("fpi_monotonicity", not problems, f"mdp {i}: {problems[:1]}", mdp)
            problems = fpi_fixed_point_problems(mdp, report, cfg, fp)
            kernel = viability_kernel(mdp)
            if report.region.mismatches(kernel).size:
                problems.append("converged region differs from the viability kernel")
            tally.record("fpi_fixed_point", not problems, f"mdp {i}: {problems[:1]}", mdp)
            audit = rollout_audit(mdp, report.policy, report.region, horizon=mdp.n_cells)
            tally.record("safety_audit", audit.passed,
                         f"mdp {i}: start cells {audit.violating_starts[:3]} violate", mdp)

        def barrier():
            F = identify_feasible_region(mdp, pi, None, fp).F
            V = evaluate_policy(mdp, pi, bcfg)
            for t in (bcfg.t0, 10.0, 1e6):
                bad = barrier_choice_violations(mdp, pi, F, V, bcfg, t)
                tally.record("barrier_feasibility", bad.size == 0,
                             f"mdp {i}, t={t:g}: cells {bad[:3].tolist()} leave {{F < p}}", mdp)
            report = run_fpi(mdp, pi, bcfg, fp)
            same = report.region.mismatches(viability_kernel(mdp)).size == 0
            tally.record("barrier_feasibility", same,
                         f"mdp {i}: barrier FPI region differs from the kernel", mdp)

        def kernel():
            err = kernel_problems(mdp, rng)
            tally.record("kernel_properties", err is None, f"mdp {i}: {err}", mdp)

        tally.guard("oracle_equivalence", mdp, oracle)
        tally.guard("self_consistency", mdp, consistency)
        tally.guard("dominance", mdp, dominance)
        tally.guard("operator_monotonicity", mdp, monotone)
        tally.guard("policy_evaluation", mdp, evaluation)
        tally.guard("fpi_fixed_point", mdp, fpi)
        tally.guard("barrier_feasibility", mdp, barrier)
        tally.guard("kernel_properties", mdp, kernel)

    for j in range(EXHAUSTIVE_MDPS):
        mdp = random_finite_mdp(rng, max_cells=EXHAUSTIVE_CELLS, max_actions=EXHAUSTIVE_ACTIONS,
                                gamma=gamma, exact_actions=True)

        def exhaustive():
            star  = solve_risky_bellman(mdp, fp).F.values
            brute = enumerate_optimal_cdf(mdp).values
            gap   = float(np.max(np.abs(star - brute)))
            tally.record("exhaustive_optimality", gap <= tol,
                         f"small mdp {j}: |F* - enumerated| = {gap:.3g}", mdp)

        tally.guard("exhaustive_optimality", mdp, exhaustive)

    report = VerifyReport(seed=seed, n_mdps=n_mdps,
                          checks=[tally.results[n] for n in CHECK_NAMES],
                          failure_artifact=tally.artifact)
    logger.info("Verify seed %d: %d/%d checks passed", seed,
                sum(c.passed for c in report.checks), len(report.checks))
    return report


# ── Post-solve audit ─────────────────────────────────────────────────────────

def audit_run(mdp: FiniteMdp, report: FpiReport, cfg: ImprovementConfig,
              fp: FixedPointConfig, horizon: int = 200,
              cbf_mask: Optional[RegionMask] = None,
              cbf_counterexamples: Optional[int] = None,
              min_kernel_agreement: float = 0.99,
              max_cbf_outside: float = 0.005) -> RunAudit:
    """
    Checks on a converged run: trace monotonicity, fixed-point residuals,
    region vs viability kernel, rollout safety and (optionally) CBF inclusion.

    The CBF set is compared after intersecting with the constraint set;
    counterexample cells of the raw barrier set are reported separately.
    """
    tally  = _Tally(["fpi_monotonicity", "fpi_fixed_point", "kernel_agreement",
                     "safety_audit", "cbf_inclusion"])
    audit  = RunAudit(env=mdp.name)

    problems = fpi_trace_problems(report, mdp.gamma, cfg, fp)
    tally.record("fpi_monotonicity", not problems, "; ".join(problems[:3]))
    def fixed_point():
        found = fpi_fixed_point_problems(mdp, report, cfg, fp)
        tally.record("fpi_fixed_point", not found, "; ".join(found[:3]))

    tally.guard("fpi_fixed_point", mdp, fixed_point)

    kernel = viability_kernel(mdp)
    diff   = report.region.mismatches(kernel)
    audit.kernel_size       = kernel.count()
    audit.kernel_mismatches = int(diff.size)
    audit.kernel_agreement  = 1.0 - diff.size / mdp.n_cells
    audit.band_cells_total  = sum(r.band_cells for r in report.iterations)
    if diff.size:
        logger.warning("Region differs from the viability kernel at %d cell(s) (first %s)",
                       diff.size, diff[:5].tolist())
    tally.record("kernel_agreement", audit.kernel_agreement >= min_kernel_agreement,
                 f"agreement {audit.kernel_agreement:.4f} below {min_kernel_agreement}")

    rollout = rollout_audit(mdp, report.policy, report.region, horizon)
    audit.rollout_horizon    = horizon
    audit.rollout_violations = len(rollout.violating_starts)
    tally.record("safety_audit", rollout.passed,
                 f"{len(rollout.violating_starts)} start cell(s) violate within {horizon} steps")

    if cbf_mask is not None:
        scoped  = RegionMask(cbf_mask.mask & ~mdp.violation)
        outside = np.flatnonzero(scoped.mask & ~report.region.mask)
        audit.cbf_cells           = scoped.count()
        audit.cbf_outside_region  = int(outside.size)
        audit.cbf_counterexamples = cbf_counterexamples
        for cell in outside[:20]:
            logger.warning("CBF cell %d lies outside the learned region", int(cell))
        share = outside.size / max(1, scoped.count())
        tally.record("cbf_inclusion", share <= max_cbf_outside,
                     f"{outside.size} of {scoped.count()} CBF cells outside the region")
        audit.checks = list(tally.results.values())
    else:
        audit.checks = [r for n, r in tally.results.items() if n != "cbf_inclusion"]
    return audit


def summarize(checks: List[CheckResult]) -> List[Dict[str, object]]:
    """Rows for the printed pass/fail table."""
    return [{"check": c.name, "cases": c.cases, "failures": c.failures,
             "status": "PASS" if c.passed else "FAIL"} for c in checks]
