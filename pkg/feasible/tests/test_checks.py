"""
feasible/tests/test_checks.py

The verify suite end to end, including its negative control.

Run:
    pytest feasible/tests/test_checks.py -v
"""

import numpy as np
import pytest

from feasible.artifacts import load_mdp_table, read_header
from feasible.checks import (CHECK_NAMES, audit_run, check_oracle_equivalence,
                             check_rollout_consistency, check_self_consistency, kernel_problems,
                             run_verify_suite, summarize)
from feasible.feasibility import FixedPointConfig
from feasible.mdp_core import RegionMask, TabularPolicy
from feasible.planning import ImprovementConfig, run_fpi
from feasible.tests.conftest import stay_policy


class TestSingleChecks:
    def test_chain_passes(self, chain3):
        fp  = FixedPointConfig()
        pol = TabularPolicy.constant(3, 2, 1)
        assert check_oracle_equivalence(chain3, 0.1, fp).size == 0
        assert check_self_consistency(chain3, pol, fp) is None
        assert check_rollout_consistency(chain3, pol, fp) is None

    def test_fault_injection_detected(self, chain3):
        err = check_self_consistency(chain3, TabularPolicy.constant(3, 2, 1), FixedPointConfig(),
                                     inject_fault=True)
        assert err is not None and "residual" in err

    def test_kernel_properties(self, chain3, rng):
        assert kernel_problems(chain3, rng) is None


class TestVerifySuite:
    def test_passes(self, tmp_path):
        report = run_verify_suite(n_mdps=15, seed=0, dump_dir=tmp_path)
        failed = [(c.name, c.first_failure) for c in report.checks if not c.passed]
        assert report.passed, f"failed checks: {failed}"
        assert [c.name for c in report.checks] == CHECK_NAMES
        assert all(c.cases > 0 for c in report.checks)
        assert report.failure_artifact is None

    def test_other_seed_passes(self):
        assert run_verify_suite(n_mdps=10, seed=3).passed

    def test_injected_fault_fails(self, tmp_path):
        report = run_verify_suite(n_mdps=5, seed=0, inject_fault=True, dump_dir=tmp_path)
        by_name = {c.name: c for c in report.checks}
        assert not report.passed
        assert by_name["self_consistency"].failures == 1
        assert report.failure_artifact is not None
        header = read_header(report.failure_artifact)
        assert header["check"] == "self_consistency"
        mdp = load_mdp_table(report.failure_artifact)
        assert mdp.gamma == pytest.approx(0.99)

    def test_summary_rows(self):
        rows = summarize(run_verify_suite(n_mdps=2, seed=1).checks)
        assert {r["status"] for r in rows} == {"PASS"}


class TestRunAudit:
    def test_gridworld_audit(self, gridworld_mdp):
        cfg, fp = ImprovementConfig(), FixedPointConfig()
        report  = run_fpi(gridworld_mdp, stay_policy(gridworld_mdp), cfg, fp)
        audit   = audit_run(gridworld_mdp, report, cfg, fp, horizon=100)
        assert audit.passed
        assert audit.kernel_mismatches == 0 and audit.kernel_agreement == 1.0
        assert audit.cbf_cells is None
        assert "cbf_inclusion" not in [c.name for c in audit.checks]

    def test_cbf_outside_region_fails(self, chain3):
        cfg, fp = ImprovementConfig(), FixedPointConfig()
        report  = run_fpi(chain3, TabularPolicy.constant(3, 2, 0), cfg, fp)
        # cell 2 violates, so only the safe cells count against the region
        cbf     = RegionMask(np.array([True, True, True]))
        audit   = audit_run(chain3, report, cfg, fp, horizon=10, cbf_mask=cbf)
        assert audit.cbf_cells == 2 and audit.cbf_outside_region == 0
        assert audit.passed
