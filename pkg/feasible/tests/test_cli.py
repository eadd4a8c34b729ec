"""
feasible/tests/test_cli.py

End-to-end runs of fpi.py subcommands on the small gridworld presets.

Run:
    pytest feasible/tests/test_cli.py -v
"""

import json
import shutil
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
import pytest

import fpi
from feasible import artifacts
from feasible.config import validate_config

OUTPUTS = ["config.toml", "report.json", "audit.json", "final_F.csv", "final_V.csv",
           "final_region.csv", "final_policy.csv"]


@pytest.fixture
def solved(tmp_path):
    out = tmp_path / "tiny"
    assert fpi.main(["-q", "solve", "--preset", "tiny", "--out", str(out)]) == fpi.EXIT_OK
    return out


class TestSolve:
    def test_writes_artifacts(self, solved):
        for name in OUTPUTS:
            assert (solved / name).is_file(), f"missing {name}"
        assert sorted(p.name for p in (solved / "iterations").glob("iter_000_*.csv")) == [
            "iter_000_F.csv", "iter_000_V.csv", "iter_000_region.csv"]

    def test_report_contents(self, solved):
        report = json.loads((solved / "report.json").read_text())
        assert report["converged"] and report["env"] == "gridworld"
        assert report["iterations_used"] == len(report["iterations"])
        audit = json.loads((solved / "audit.json").read_text())
        assert audit["kernel_mismatches"] == 0
        assert audit["kernel_size"] == report["final_region_size"]

    def test_v_is_nan_free_on_region(self, solved):
        V, header = artifacts.read_field_csv(solved / "final_V.csv")
        region, _ = artifacts.read_field_csv(solved / "final_region.csv")
        assert V.size == 25 and region.size == 25
        assert np.isfinite(V[region.astype(bool)]).all()
        assert "config" in header and "env_params" in header

    def test_rerun_is_byte_identical(self, solved):
        first = {name: (solved / name).read_bytes() for name in OUTPUTS}
        assert fpi.main(["-q", "solve", "--preset", "tiny", "--out", str(solved)]) == fpi.EXIT_OK
        for name in OUTPUTS:
            assert (solved / name).read_bytes() == first[name], f"{name} changed between runs"

    def test_dump_mdp_and_no_dumps(self, tmp_path):
        out = tmp_path / "run"
        assert fpi.main(["-q", "solve", "--preset", "tiny", "--out", str(out),
                         "--no-dumps", "--dump-mdp"]) == fpi.EXIT_OK
        assert (out / "mdp.csv").is_file()
        assert not (out / "iterations").exists()

    def test_missing_env_is_usage_error(self, tmp_path):
        assert fpi.main(["-q", "solve", "--out", str(tmp_path)]) == fpi.EXIT_USAGE

    def test_iteration_cap_fails(self, tmp_path):
        assert fpi.main(["-q", "solve", "--preset", "tiny", "--out", str(tmp_path),
                         "--max-iterations", "1"]) == fpi.EXIT_FAIL
        assert (tmp_path / "report.json").is_file()

    def test_unknown_env_rejected_by_parser(self):
        with pytest.raises(SystemExit) as info:
            fpi.main(["solve", "--env", "cartpole"])
        assert info.value.code == 2


class TestConfigFiles:
    @pytest.mark.parametrize("text", [
        "gamma = \n",                 # TOML syntax
        "gamma = 1.5\n",              # out of range
        "schema_version = 2\n",       # unsupported schema
        "learning_rate = 0.1\n",      # unknown key
    ])
    def test_bad_config_is_usage_error(self, tmp_path, text):
        path = tmp_path / "run.toml"
        path.write_text(text)
        assert fpi.main(["-q", "solve", "--preset", "tiny", "--config", str(path),
                         "--out", str(tmp_path / "out")]) == fpi.EXIT_USAGE

    def test_bad_env_params_is_usage_error(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('env = "gridworld"\n\n[env_params]\nmoves = 6\n')
        assert fpi.main(["-q", "solve", "--config", str(path),
                         "--out", str(tmp_path / "out")]) == fpi.EXIT_USAGE

    def test_misspelled_env_param_is_usage_error(self, tmp_path, capsys):
        path = tmp_path / "run.toml"
        path.write_text('env = "gridworld"\n\n[env_params]\nwidth = 5\nheight = 5\nhazard = [[1, 1]]\n')
        assert fpi.main(["-q", "solve", "--config", str(path),
                         "--out", str(tmp_path / "out")]) == fpi.EXIT_USAGE
        assert "env_params.hazard" in capsys.readouterr().err
        assert not (tmp_path / "out" / "report.json").exists()

    def test_config_file_runs(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('env = "gridworld"\nmode = "barrier"\n\n'
                        '[env_params]\nwidth = 4\nheight = 4\nhazards = [[1, 1]]\n')
        out = tmp_path / "out"
        assert fpi.main(["-q", "solve", "--config", str(path), "--out", str(out)]) == fpi.EXIT_OK
        assert json.loads((out / "report.json").read_text())["mode"] == "barrier"


class TestExport:
    def test_images(self, solved):
        assert fpi.main(["-q", "export", str(solved)]) == fpi.EXIT_OK
        img = artifacts.read_pgm(solved / "images" / "iter_000_F.pgm")
        assert img.shape == (5, 5)
        assert (solved / "images" / "iter_000_region.pgm").is_file()

    def test_not_a_run_dir(self, tmp_path):
        assert fpi.main(["-q", "export", str(tmp_path)]) == fpi.EXIT_USAGE

    def test_no_dumps(self, tmp_path):
        out = tmp_path / "run"
        fpi.main(["-q", "solve", "--preset", "tiny", "--out", str(out), "--no-dumps"])
        assert fpi.main(["-q", "export", str(out)]) == fpi.EXIT_USAGE

    def test_cbf_overlay_needs_baseline(self, solved):
        assert fpi.main(["-q", "export", str(solved), "--cbf"]) == fpi.EXIT_USAGE


class TestVerifyAndOracle:
    def test_verify_passes(self, tmp_path):
        assert fpi.main(["-q", "verify", "--n-mdps", "5", "--out", str(tmp_path)]) == fpi.EXIT_OK
        report = json.loads((tmp_path / "seed_0" / "verify.json").read_text())
        assert report["seed"] == 0

    def test_verify_negative_control(self, tmp_path):
        assert fpi.main(["-q", "verify", "--n-mdps", "5", "--out", str(tmp_path),
                         "--inject-fault"]) == fpi.EXIT_FAIL
        assert list((tmp_path / "seed_0").glob("failure_*.csv"))

    def test_verify_seed_sweep(self, tmp_path):
        assert fpi.main(["-q", "verify", "--n-mdps", "3", "--seeds", "2",
                         "--out", str(tmp_path)]) == fpi.EXIT_OK
        assert (tmp_path / "seed_1" / "verify.json").is_file()

    def test_oracle_agrees_with_run(self, solved, tmp_path):
        out = tmp_path / "kernel"
        assert fpi.main(["-q", "oracle", "--preset", "tiny", "--out", str(out),
                         "--run-dir", str(solved)]) == fpi.EXIT_OK
        kernel, _ = artifacts.read_field_csv(out / "kernel.csv")
        region, _ = artifacts.read_field_csv(solved / "final_region.csv")
        assert np.array_equal(kernel, region)
        assert (out / "kernel.pgm").is_file()

    def test_oracle_missing_run(self, tmp_path):
        assert fpi.main(["-q", "oracle", "--preset", "tiny", "--out", str(tmp_path),
                         "--run-dir", str(tmp_path / "none")]) == fpi.EXIT_USAGE


class TestEffectiveConfigEverywhere:
    def test_every_output_carries_config(self, tmp_path):
        out = tmp_path / "tiny"
        assert fpi.main(["-q", "solve", "--preset", "tiny", "--out", str(out),
                         "--dump-mdp"]) == fpi.EXIT_OK
        assert fpi.main(["-q", "export", str(out)]) == fpi.EXIT_OK
        assert fpi.main(["-q", "oracle", "--preset", "tiny",
                         "--out", str(out / "kernel")]) == fpi.EXIT_OK

        files = [p for p in out.rglob("*") if p.is_file()]
        assert any(p.suffix == ".pgm" for p in files)
        missing = [str(p.relative_to(out)) for p in files
                   if "schema_version" not in p.read_text()]
        assert not missing, f"outputs without the effective config: {missing}"

    def test_json_reports_have_structured_header(self, solved):
        for name in ("report.json", "audit.json"):
            data = json.loads((solved / name).read_text())
            assert list(data)[0] == "header", name
            assert data["header"]["config"]["schema_version"] == 1
            assert data["header"]["config"]["env_params"]["width"] == 5
            assert data["header"]["env_params"]["gamma"] == 0.99
            assert data["header"]["mdp"]["cells"] == 25

    def test_image_header_reloads_as_config(self, solved):
        assert fpi.main(["-q", "export", str(solved)]) == fpi.EXIT_OK
        header = artifacts.read_header(solved / "images" / "iter_000_V.pgm")
        cfg    = validate_config(tomllib.loads(header["config"]))
        assert cfg.env == "gridworld" and cfg.env_params["goal"] == [4, 0]

    def test_verify_outputs_carry_config(self, tmp_path):
        assert fpi.main(["-q", "verify", "--n-mdps", "5", "--out", str(tmp_path),
                         "--inject-fault"]) == fpi.EXIT_FAIL
        report = json.loads((tmp_path / "seed_0" / "verify.json").read_text())
        assert report["header"]["config"]["n_mdps"] == 5
        assert report["header"]["inject_fault"] is True
        (dump,) = (tmp_path / "seed_0").glob("failure_*.csv")
        header = artifacts.read_header(dump)
        assert tomllib.loads(header["config"])["seed"] == 0


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
class TestWorkerDeterminism:
    def test_acc_run_is_byte_identical_across_workers(self, tmp_path, monkeypatch):
        # 81x81 cells is above the threshold at which sweeps split across threads
        out  = tmp_path / "acc"
        args = ["-q", "solve", "--env", "acc", "--grid", "81", "81", "--actions", "21",
                "--out", str(out), "--dump-mdp"]
        runs = {}
        for workers in (1, 4, 8):
            monkeypatch.setenv("FPI_WORKERS", str(workers))
            if out.exists():
                shutil.rmtree(out)
            status = fpi.main(args)
            runs[workers] = (status, _snapshot(out))

        status, files = runs[1]
        assert "final_V.csv" in files and "audit.json" in files
        for workers in (4, 8):
            assert runs[workers][0] == status
            assert runs[workers][1].keys() == files.keys()
            changed = [name for name in files if runs[workers][1][name] != files[name]]
            assert not changed, f"{workers} workers changed {changed}"
