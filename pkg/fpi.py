"""
fpi.py
------
Feasible policy iteration on discretized control tasks and gridworlds.

Usage:
    python fpi.py solve  --preset tiny
    python fpi.py solve  --env acc --grid 201 201 --actions 41 --out runs/acc
    python fpi.py verify --n-mdps 100 --seed 0
    python fpi.py verify --seeds 100 --inject-fault
    python fpi.py oracle --preset gridworld --run-dir runs/latest
    python fpi.py export runs/acc --cbf

Exit status: 0 success, 1 solver or check failure, 2 usage / config error.
Environment: FPI_WORKERS (sweep threads), FPI_LOG_LEVEL.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from feasible import artifacts
from feasible.checks import audit_run, run_verify_suite, summarize
from feasible.config import PRESETS, RunConfig, read_config_file, resolve_config, to_toml, validate_config
from feasible.environments import (CBFS, ENVIRONMENTS, EnvironmentSpec, cbf_counterexamples,
                                   cbf_one_step_violations, cbf_region, default_grid, make_env)
from feasible.errors import ConfigError, ConvergenceError, FpiError
from feasible.mdp_core import FiniteMdp, GridSpec, RegionMask, TabularPolicy, describe, discretize
from feasible.oracle import viability_kernel
from feasible.planning import run_fpi

logger = logging.getLogger("fpi")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


# ── CLI args ───────────────────────────────────────────────────────────────
def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--env",      choices=sorted(ENVIRONMENTS), default=None)
    p.add_argument("--preset",   choices=sorted(PRESETS), default=None)
    p.add_argument("--config",   type=str,   default=None, help="TOML run config")
    p.add_argument("--grid",     type=int,   nargs="+", default=None, help="cells per state dim")
    p.add_argument("--actions",  type=int,   nargs="+", default=None, help="actions per action dim")
    p.add_argument("--gamma",    type=float, default=None)
    p.add_argument("--p",        type=float, default=None, help="feasibility threshold")
    p.add_argument("--eps-fp",   type=float, default=None)
    p.add_argument("--eps-v",    type=float, default=None)
    p.add_argument("--mode",     choices=["exact", "barrier"], default=None)
    p.add_argument("--t0",       type=float, default=None)
    p.add_argument("--t-factor", type=float, default=None)
    p.add_argument("--t-period", type=int,   default=None)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--initial-policy", choices=["first", "random"], default=None)
    p.add_argument("--horizon",  type=int,   default=None, help="rollout audit horizon")
    p.add_argument("--out",      type=str,   default=None)
    p.add_argument("--seed",     type=int,   default=None)


def get_args(argv=None):
    p = argparse.ArgumentParser(description="Feasible policy iteration on finite MDPs")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet",   action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="run FPI and audit the result")
    _run_flags(solve)
    solve.add_argument("--no-dumps", action="store_true", help="skip per-iteration CSV dumps")
    solve.add_argument("--dump-mdp", action="store_true", help="write the MDP table")

    verify = sub.add_parser("verify", help="invariant suite on random finite MDPs")
    verify.add_argument("--n-mdps", type=int, default=100)
    verify.add_argument("--seed",   type=int, default=0)
    verify.add_argument("--seeds",  type=int, default=None, help="sweep this many seeds from --seed")
    verify.add_argument("--out",    type=str, default="runs/verify")
    verify.add_argument("--inject-fault", action="store_true",
                        help="corrupt one CDF value (negative control, must fail)")

    oracle = sub.add_parser("oracle", help="viability kernel of the configured MDP")
    _run_flags(oracle)
    oracle.add_argument("--run-dir", type=str, default=None, help="compare against a solved run")

    export = sub.add_parser("export", help="PGM heatmaps from a completed run")
    export.add_argument("run_dir", type=str)
    export.add_argument("--cbf", action="store_true", help="add the CBF region overlay")
    return p.parse_args(argv)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = os.environ.get("FPI_LOG_LEVEL", "INFO").upper()
    if verbose:
        level = "DEBUG"
    elif quiet:
        level = "WARNING"
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def config_from_args(args) -> RunConfig:
    overrides = {
        "env": args.env, "grid": args.grid, "actions": args.actions, "gamma": args.gamma,
        "p": args.p, "eps_fp": args.eps_fp, "eps_v": args.eps_v, "mode": args.mode,
        "t0": args.t0, "t_factor": args.t_factor, "t_period": args.t_period,
        "max_iterations": args.max_iterations, "initial_policy": args.initial_policy,
        "horizon": args.horizon, "out": args.out, "seed": args.seed,
    }
    if getattr(args, "no_dumps", False):
        overrides["dumps"] = False
    return resolve_config(args.preset, args.config, overrides)


# ── Problem construction ───────────────────────────────────────────────────
def build_env(cfg: RunConfig) -> Tuple[EnvironmentSpec, GridSpec]:
    if cfg.env is None:
        raise ConfigError("no environment given (use --env, --preset or 'env' in the config)",
                          field="env")
    try:
        env  = make_env(cfg.env, cfg.env_params)
        grid = default_grid(env, cfg.grid, cfg.actions)
    except FpiError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid environment settings: {exc}", field="env_params") from exc
    return env, grid


def build_problem(cfg: RunConfig) -> Tuple[EnvironmentSpec, FiniteMdp]:
    env, grid = build_env(cfg)
    return env, discretize(env, grid, cfg.gamma)


def run_header(cfg: RunConfig, mdp: FiniteMdp) -> dict:
    """Text header for CSV and PGM outputs; the config is its TOML echo."""
    return {"config": to_toml(cfg), "mdp": describe(mdp), "env_params": dict(mdp.params)}


def report_header(cfg: RunConfig, mdp: FiniteMdp) -> dict:
    """Structured header for JSON reports."""
    return {"config": cfg.model_dump(mode="json"), "mdp": describe(mdp),
            "env_params": dict(mdp.params)}


def constraint_mask(env: EnvironmentSpec, grid: GridSpec) -> np.ndarray:
    h = np.asarray(env.constraint(grid.centers())).reshape(grid.n_cells, -1)
    return ~(h > 0).any(axis=1)


# ── solve ──────────────────────────────────────────────────────────────────
def cmd_solve(cfg: RunConfig, dump_mdp: bool = False) -> int:
    env, mdp = build_problem(cfg)
    out      = Path(cfg.out)
    header   = run_header(cfg, mdp)
    jheader  = report_header(cfg, mdp)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(to_toml(cfg))
    if dump_mdp:
        artifacts.dump_mdp_table(mdp, out / "mdp.csv", header)

    if cfg.initial_policy == "random":
        policy_0 = TabularPolicy.random(mdp.n_cells, mdp.n_actions, np.random.default_rng(cfg.seed))
    else:
        policy_0 = TabularPolicy.constant(mdp.n_cells, mdp.n_actions, 0)

    def dump(k, F, V, region, policy):
        if not cfg.dumps:
            return
        stem = out / "iterations" / f"iter_{k:03d}"
        artifacts.write_field_csv(f"{stem}_F.csv", F.values, {**header, "iteration": k})
        artifacts.write_field_csv(f"{stem}_V.csv", V.values, {**header, "iteration": k})
        artifacts.write_field_csv(f"{stem}_region.csv", region.mask, {**header, "iteration": k})

    print(f"Solving {mdp.name}: {mdp.n_cells} cells x {mdp.n_actions} actions, "
          f"gamma={mdp.gamma}, p={cfg.p}, mode={cfg.mode}")
    try:
        report = run_fpi(mdp, policy_0, cfg.improvement(), cfg.fixed_point(), on_iteration=dump)
    except ConvergenceError as exc:
        if exc.report is not None:
            artifacts.write_report(out / "report.json", exc.report, jheader)
        print(f"FPI failed: {exc}", file=sys.stderr)
        return EXIT_FAIL

    for rec in report.iterations:
        print(f"iter {rec.iteration:3d}  region {rec.region_size:7d}  "
              f"changes {rec.policy_changes:6d}  band {rec.band_cells:4d}  "
              f"sweeps V/F {rec.eval_sweeps}/{rec.cdf_sweeps}")

    artifacts.write_report(out / "report.json", report, jheader)
    artifacts.write_field_csv(out / "final_F.csv", report.F.values, header)
    artifacts.write_field_csv(out / "final_V.csv", report.V.values, header)
    artifacts.write_field_csv(out / "final_region.csv", report.region.mask, header)
    artifacts.write_field_csv(out / "final_policy.csv", report.policy.actions, header)

    cbf_mask, counter = None, None
    if cfg.env in CBFS:
        cbf      = CBFS[cfg.env](cfg.env_params)
        cbf_mask = cbf_region(cbf, mdp.grid)
        counter  = int(cbf_counterexamples(cbf, env, mdp.grid).size)
    audit = audit_run(mdp, report, cfg.improvement(), cfg.fixed_point(), cfg.horizon,
                      cbf_mask, counter)
    artifacts.write_report(out / "audit.json", audit, jheader)

    print(f"\nConverged after {report.iterations_used} iteration(s): "
          f"region {report.final_region_size}/{mdp.n_cells}, "
          f"kernel agreement {audit.kernel_agreement:.4f}, "
          f"rollout violations {audit.rollout_violations}")
    if audit.cbf_cells is not None:
        print(f"CBF cells {audit.cbf_cells}, outside learned region {audit.cbf_outside_region}, "
              f"counterexamples {audit.cbf_counterexamples}")
    _print_checks(audit.checks)
    print(f"Artifacts → {out}")
    return EXIT_OK if audit.passed else EXIT_FAIL


def _print_checks(checks) -> None:
    for row in summarize(checks):
        print(f"  {row['check']:24s} {row['status']}  ({row['failures']}/{row['cases']} failed)")


# ── verify ─────────────────────────────────────────────────────────────────
def cmd_verify(n_mdps: int, seed: int, seeds: Optional[int], out: str,
               inject_fault: bool = False) -> int:
    out = Path(out)
    all_passed = True
    for s in range(seed, seed + (seeds or 1)):
        cfg    = validate_config({"seed": s, "n_mdps": n_mdps, "out": str(out / f"seed_{s}")})
        report = run_verify_suite(n_mdps=n_mdps, seed=s, p=cfg.p, gamma=cfg.gamma,
                                  eps_fp=cfg.eps_fp, eps_v=cfg.eps_v, inject_fault=inject_fault,
                                  dump_dir=Path(cfg.out),
                                  header={"config": to_toml(cfg), "inject_fault": inject_fault})
        artifacts.write_report(Path(cfg.out) / "verify.json", report,
                               {"config": cfg.model_dump(mode="json"),
                                "inject_fault": inject_fault})
        print(f"\nseed {s}: {n_mdps} random MDPs")
        _print_checks(report.checks)
        if not report.passed:
            all_passed = False
            failed = next(c for c in report.checks if not c.passed)
            print(f"  first failure [{failed.name}]: {failed.first_failure}")
            if report.failure_artifact:
                print(f"  offending MDP → {report.failure_artifact}")
            break
    print("\nAll checks passed" if all_passed else "\nVerification FAILED")
    return EXIT_OK if all_passed else EXIT_FAIL


# ── oracle ─────────────────────────────────────────────────────────────────
def cmd_oracle(cfg: RunConfig, run_dir: Optional[str] = None) -> int:
    _, mdp = build_problem(cfg)
    kernel = viability_kernel(mdp)
    out    = Path(cfg.out)
    header = run_header(cfg, mdp)
    artifacts.write_field_csv(out / "kernel.csv", kernel.mask, header)
    if mdp.grid.ndim == 2:
        artifacts.write_field_pgm(out / "kernel.pgm", artifacts.mask_gray(kernel.mask), mdp.grid,
                                  [f"viability kernel of {mdp.name}: {kernel.count()} cells"],
                                  header)
    print(f"Viability kernel of {mdp.name}: {kernel.count()}/{mdp.n_cells} cells → {out}")

    if run_dir is None:
        return EXIT_OK
    path = Path(run_dir) / "final_region.csv"
    if not path.is_file():
        print(f"missing run artifact: {path}", file=sys.stderr)
        return EXIT_USAGE
    values, _ = artifacts.read_field_csv(path)
    if values.size != mdp.n_cells:
        print(f"run has {values.size} cells but the configured MDP has {mdp.n_cells}",
              file=sys.stderr)
        return EXIT_FAIL
    diff = RegionMask(values.astype(bool)).mismatches(kernel)
    for cell in diff[:20]:
        logger.warning("band cell %d: run region and kernel disagree", int(cell))
    agreement = 1.0 - diff.size / mdp.n_cells
    print(f"Cell agreement with {run_dir}: {agreement:.4f} ({diff.size} mismatching cell(s))")
    return EXIT_OK if agreement >= 0.99 else EXIT_FAIL


# ── export ─────────────────────────────────────────────────────────────────
def cmd_export(run_dir: str, with_cbf: bool = False) -> int:
    run = Path(run_dir)
    cfg_path = run / "config.toml"
    if not run.is_dir() or not cfg_path.is_file() or not (run / "report.json").is_file():
        print(f"{run} is not a completed run directory (config.toml / report.json missing)",
              file=sys.stderr)
        return EXIT_USAGE
    cfg       = validate_config(read_config_file(cfg_path))
    env, grid = build_env(cfg)
    if grid.ndim != 2:
        print(f"export needs a 2-D grid, {cfg.env} has {grid.ndim}", file=sys.stderr)
        return EXIT_USAGE

    images = run / "images"
    counts = []
    for region_csv in sorted((run / "iterations").glob("iter_*_region.csv")):
        stem   = region_csv.name[: -len("_region.csv")]
        mask, hdr_r = artifacts.read_field_csv(region_csv)
        mask   = mask.astype(bool)
        F, hdr_f = artifacts.read_field_csv(run / "iterations" / f"{stem}_F.csv")
        V, hdr_v = artifacts.read_field_csv(run / "iterations" / f"{stem}_V.csv")
        edge   = artifacts.boundary_cells(mask, grid)
        count  = int(mask.sum())
        counts.append(count)
        # each image carries the header of the CSV it was rendered from
        artifacts.write_field_pgm(images / f"{stem}_F.pgm",
                                  artifacts.annotate(artifacts.cdf_gray(F), edge), grid,
                                  [f"{stem} CDF, region boundary in black"], hdr_f)
        artifacts.write_field_pgm(images / f"{stem}_V.pgm",
                                  artifacts.annotate(artifacts.value_gray(V), edge), grid,
                                  [f"{stem} value, region boundary in black"], hdr_v)
        artifacts.write_field_pgm(images / f"{stem}_region.pgm", artifacts.mask_gray(mask), grid,
                                  [f"{stem} region: {count} cells"], hdr_r)
        print(f"{stem}: region {count} cells")
    if not counts:
        print(f"{run} has no per-iteration dumps (solved with --no-dumps?)", file=sys.stderr)
        return EXIT_USAGE
    grows = all(b >= a for a, b in zip(counts, counts[1:]))
    print(f"Region counts nondecreasing: {'yes' if grows else 'NO'}")

    status = EXIT_OK if grows else EXIT_FAIL
    if with_cbf:
        if cfg.env not in CBFS:
            print(f"no CBF baseline for {cfg.env}", file=sys.stderr)
            return EXIT_USAGE
        cbf     = CBFS[cfg.env](cfg.env_params)
        raw     = cbf_region(cbf, grid).mask
        scoped  = raw & constraint_mask(env, grid)
        final, hdr = artifacts.read_field_csv(run / "final_region.csv")
        final   = final.astype(bool)
        outside = int((scoped & ~final).sum())
        stuck   = int(cbf_one_step_violations(cbf, env, grid).size)
        artifacts.write_field_pgm(images / "cbf_region.pgm", artifacts.mask_gray(scoped), grid,
                                  [f"{cfg.env} CBF region within the constraint set: "
                                   f"{int(scoped.sum())} cells"], hdr)
        overlay = np.where(scoped & final, 255, np.where(final, 160, np.where(scoped, 80, 0)))
        artifacts.write_field_pgm(images / "cbf_overlay.pgm", overlay, grid,
                                  ["255 both, 160 learned only, 80 CBF only, 0 neither"], hdr)
        print(f"CBF region {int(scoped.sum())} cells (raw {int(raw.sum())}), "
              f"learned region {int(final.sum())} cells, CBF outside learned {outside}, "
              f"cells without a decreasing action {stuck}")
    print(f"Images → {images}")
    return status


# ── Main ───────────────────────────────────────────────────────────────────
def main(argv=None) -> int:
    args = get_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        if args.command == "solve":
            return cmd_solve(config_from_args(args), dump_mdp=args.dump_mdp)
        if args.command == "verify":
            return cmd_verify(args.n_mdps, args.seed, args.seeds, args.out, args.inject_fault)
        if args.command == "oracle":
            return cmd_oracle(config_from_args(args), args.run_dir)
        return cmd_export(args.run_dir, args.cbf)
    except ConfigError as exc:
        where = f" (line {exc.line})" if exc.line else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FpiError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
