"""
feasible/tests/test_config_artifacts.py

Config precedence and loading, field CSVs, PGM images, reports and MDP tables.

Run:
    pytest feasible/tests/test_config_artifacts.py -v
"""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
import pytest

from feasible import artifacts
from feasible.config import (PRESETS, RunConfig, read_config_file, resolve_config, to_toml,
                             validate_config)
from feasible.errors import ConfigError
from feasible.mdp_core import GridSpec
from feasible.planning import FpiReport


class TestConfig:
    def test_defaults(self):
        cfg = resolve_config()
        assert (cfg.gamma, cfg.p, cfg.eps_fp, cfg.eps_v) == (0.99, 0.1, 1e-12, 1e-9)
        assert cfg.env is None and cfg.mode == "exact"

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('gamma = 0.95\np = 0.2\n\n[env_params]\nwidth = 6\n')
        cfg = resolve_config("tiny", path, {"p": 0.3, "gamma": None})
        assert cfg.env == "gridworld"
        assert cfg.gamma == 0.95
        assert cfg.p == 0.3
        # file table merges into the preset's env_params
        assert cfg.env_params["width"] == 6 and cfg.env_params["goal"] == [4, 0]

    def test_unknown_preset(self):
        with pytest.raises(ConfigError) as info:
            resolve_config("huge")
        assert info.value.field == "preset"

    def test_invalid_field_named(self):
        with pytest.raises(ConfigError) as info:
            resolve_config(overrides={"gamma": 1.5})
        assert info.value.field == "gamma"

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("gamma = 0.9\nlearning_rate = 0.1\n")
        with pytest.raises(ConfigError):
            resolve_config(config_path=path)

    def test_bad_toml_reports_line(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("gamma = 0.9\np = \n")
        with pytest.raises(ConfigError) as info:
            read_config_file(path)
        assert info.value.line == 2

    def test_schema_version(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("schema_version = 2\n")
        with pytest.raises(ConfigError) as info:
            read_config_file(path)
        assert info.value.field == "schema_version"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_config_file(tmp_path / "nope.toml")

    def test_toml_echo_reloads(self, tmp_path):
        cfg  = resolve_config("gridworld", overrides={"mode": "barrier", "t0": 2.0})
        path = tmp_path / "config.toml"
        path.write_text(to_toml(cfg))
        again = resolve_config(config_path=path)
        assert again.model_dump() == {**cfg.model_dump(),
                                      "env_params": again.env_params}
        assert again.env_params["hazards"] == [list(c) for c in PRESETS["gridworld"]["env_params"]["hazards"]]

    def test_toml_echo_quotes_keys_and_nests_tables(self, tmp_path):
        params = {"hazard cells": [[1, 1]], "layout": {"goal x": 4, "walls": [[0, 1], [2, 3]]}}
        cfg    = RunConfig(env="gridworld", env_params=params, max_iterations=None)
        path   = tmp_path / "config.toml"
        path.write_text(to_toml(cfg))
        data = read_config_file(path)
        assert data["env_params"] == params
        assert "max_iterations" not in data
        assert validate_config(data).model_dump() == cfg.model_dump()

    def test_toml_echo_survives_csv_header(self, tmp_path):
        cfg  = resolve_config("tiny")
        path = artifacts.write_field_csv(tmp_path / "F.csv", np.zeros(2), {"config": to_toml(cfg)})
        text = artifacts.read_header(path)["config"]
        assert validate_config(tomllib.loads(text)).model_dump() == cfg.model_dump()

    def test_solver_configs(self):
        cfg = RunConfig(p=0.2, eps_v=1e-6, eps_fp=1e-10)
        assert cfg.improvement().p == 0.2 and cfg.improvement().eps_v == 1e-6
        assert cfg.fixed_point().eps_fp == 1e-10


class TestFieldCsv:
    def test_header_and_nan(self, tmp_path):
        path = artifacts.write_field_csv(tmp_path / "V.csv", np.array([1.5, np.nan, -2.0]),
                                         {"env": "tiny", "iteration": 3})
        values, header = artifacts.read_field_csv(path)
        assert header == {"env": "tiny", "iteration": "3"}
        assert values[0] == 1.5 and np.isnan(values[1]) and values[2] == -2.0

    def test_full_precision(self, tmp_path):
        vals = np.array([0.99 ** 37, 1.0 / 3.0])
        values, _ = artifacts.read_field_csv(artifacts.write_field_csv(tmp_path / "F.csv", vals))
        assert np.array_equal(values, vals)

    def test_masks_as_integers(self, tmp_path):
        path = artifacts.write_field_csv(tmp_path / "m.csv", np.array([True, False]))
        assert path.read_text().splitlines() == ["1", "0"]

    def test_multiline_header(self, tmp_path):
        path = artifacts.write_field_csv(tmp_path / "x.csv", np.zeros(1), {"config": "a = 1\nb = 2"})
        assert artifacts.read_header(path)["config"] == "a = 1\nb = 2"


class TestImages:
    @pytest.fixture
    def grid(self):
        return GridSpec.from_bounds([0.0, 0.0], [2.0, 1.0], [3, 2], [(0.0,)])

    def test_cdf_gray(self):
        assert artifacts.cdf_gray(np.array([0.0, 1.0, 0.5])).tolist() == [255, 0, 128]

    def test_value_gray(self):
        assert artifacts.value_gray(np.array([np.nan, 0.0, 10.0])).tolist() == [0, 0, 255]
        assert artifacts.value_gray(np.array([np.nan, np.nan])).tolist() == [0, 0]

    def test_pgm_orientation(self, tmp_path, grid):
        # flat cell (x=0, y=1) ends up in the top-left pixel
        gray = np.array([0, 255, 10, 20, 30, 40])
        path = artifacts.write_field_pgm(tmp_path / "f.pgm", gray, grid, ["demo"])
        img  = artifacts.read_pgm(path)
        assert img.shape == (2, 3)
        assert img.tolist() == [[255, 20, 40], [0, 10, 30]]
        assert path.read_text().startswith("P2\n# demo\n3 2\n255\n")

    def test_pgm_header_lines(self, tmp_path, grid):
        path = artifacts.write_field_pgm(tmp_path / "f.pgm", np.zeros(6), grid, ["demo"],
                                         {"config": "a = 1\nb = 2", "iteration": "4"})
        assert path.read_text().startswith(
            "P2\n# config: a = 1\n# config: b = 2\n# iteration: 4\n# demo\n3 2\n255\n")
        assert artifacts.read_pgm(path).shape == (2, 3)
        header = artifacts.read_header(path)
        assert header["config"] == "a = 1\nb = 2" and header["iteration"] == "4"

    def test_read_pgm_rejects_binary(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_text("P5\n1 1\n255\n0\n")
        with pytest.raises(ValueError):
            artifacts.read_pgm(path)

    def test_boundary_cells(self):
        grid = GridSpec.from_bounds([0.0, 0.0], [2.0, 2.0], [3, 3], [(0.0,)])
        lone = np.zeros(9, dtype=bool)
        lone[4] = True
        assert artifacts.boundary_cells(lone, grid).tolist() == lone.tolist()
        assert not artifacts.boundary_cells(np.ones(9, dtype=bool), grid).any()

    def test_annotate(self):
        out = artifacts.annotate(np.array([0, 255, 255]), np.array([False, False, True]))
        assert out.tolist() == [16, 255, 0]


class TestReportsAndTables:
    def test_report_excludes_arrays(self, tmp_path):
        report = FpiReport(env="tiny", mode="exact", converged=True, F=np.zeros(3))
        data   = artifacts.read_report(artifacts.write_report(tmp_path / "r.json", report))
        assert data["env"] == "tiny" and "F" not in data

    def test_report_header_comes_first(self, tmp_path):
        report = FpiReport(env="tiny", mode="exact")
        header = {"config": {"schema_version": 1, "env": "gridworld"}}
        data   = artifacts.read_report(artifacts.write_report(tmp_path / "r.json", report, header))
        assert list(data)[0] == "header"
        assert data["header"] == header and data["mode"] == "exact"

    def test_mdp_table(self, tmp_path, chain3):
        path   = artifacts.dump_mdp_table(chain3, tmp_path / "mdp.csv", {"note": "chain"})
        loaded = artifacts.load_mdp_table(path)
        assert np.array_equal(loaded.successor, chain3.successor)
        assert np.array_equal(loaded.reward, chain3.reward)
        assert np.array_equal(loaded.violation, chain3.violation)
        assert loaded.gamma == chain3.gamma and loaded.name == "chain3"
