"""
feasible/config.py

Run configuration: schema, bundled presets and config-file loading.

Precedence (later wins): field defaults < --preset < --config file < CLI flags.
Config files are TOML; top-level keys mirror RunConfig fields and an optional
[env_params] table overrides environment parameters.
"""

import logging
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from feasible.errors import ConfigError
from feasible.feasibility import FixedPointConfig
from feasible.planning import ImprovementConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1] = SCHEMA_VERSION
    env:            Optional[str] = None
    env_params:     Dict[str, Any] = Field(default_factory=dict)
    grid:           Optional[List[int]] = None     # cells per state dimension
    actions:        Optional[List[int]] = None     # actions per action dimension
    gamma:          float = Field(0.99, gt=0, lt=1)
    p:              float = Field(0.1, gt=0, lt=1)
    eps_fp:         float = Field(1e-12, gt=0)
    eps_v:          float = Field(1e-9, gt=0)
    mode:           Literal["exact", "barrier"] = "exact"
    t0:             float = Field(1.0, gt=0)
    t_factor:       float = Field(1.1, gt=1)
    t_period:       int   = Field(1, ge=1)
    max_iterations: Optional[int] = Field(None, ge=1)
    initial_policy: Literal["first", "random"] = "first"
    horizon:        int   = Field(200, ge=1)
    out:            str   = "runs/latest"
    seed:           int   = 0
    n_mdps:         int   = Field(100, ge=1)
    dumps:          bool  = True

    @field_validator("grid")
    @classmethod
    def _check_grid(cls, v):
        if v is not None and any(n < 2 for n in v):
            raise ValueError(f"grid resolutions must be >= 2, got {v}")
        return v

    @field_validator("actions")
    @classmethod
    def _check_actions(cls, v):
        if v is not None and any(n < 1 for n in v):
            raise ValueError(f"action counts must be >= 1, got {v}")
        return v

    def improvement(self) -> ImprovementConfig:
        return ImprovementConfig(mode=self.mode, p=self.p, t0=self.t0, t_factor=self.t_factor,
                                 t_period=self.t_period, eps_v=self.eps_v,
                                 max_iterations=self.max_iterations)

    def fixed_point(self) -> FixedPointConfig:
        return FixedPointConfig(eps_fp=self.eps_fp)


# ── Presets ──────────────────────────────────────────────────────────────────

_TOP_STRIP = [(x, 10) for x in range(3, 9)]

PRESETS: Dict[str, Dict[str, Any]] = {
    "tiny": {
        "env": "gridworld",
        "env_params": {"width": 5, "height": 5, "goal": [4, 0],
                       "hazards": [[1, 4], [2, 4], [3, 4], [2, 2]],
                       "wind": [0, 0, 2, 1, 0]},
    },
    "gridworld": {
        "env": "gridworld",
        "env_params": {"width": 11, "height": 11, "goal": [9, 2],
                       "hazards": [list(c) for c in _TOP_STRIP] + [[5, 4], [5, 5]],
                       "wind": [0, 0, 0, 0, 0, 2, 2, 0, 0, 0, 0]},
    },
    "acc":      {"env": "acc", "grid": [201, 201], "actions": [41]},
    # torque bound under which the published pendulum barrier is conservative
    "pendulum": {"env": "pendulum", "grid": [201, 201], "actions": [41], "eps_v": 1e-6,
                 "env_params": {"tau_max": 30.0}},
}


# ── Loading ──────────────────────────────────────────────────────────────────

def _field_path(err: dict) -> str:
    return ".".join(str(p) for p in err.get("loc", ())) or "<root>"


def validate_config(data: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(dict(data))
    except ValidationError as exc:
        first = exc.errors()[0]
        field = _field_path(first)
        raise ConfigError(f"invalid config field '{field}': {first['msg']}", field=field) from exc


def read_config_file(path) -> Dict[str, Any]:
    """Parse a TOML config file into a plain dict (no validation)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        match = re.search(r"line (\d+)", str(exc))
        line  = int(match.group(1)) if match else None
        raise ConfigError(f"{path}: {exc}", line=line) from exc
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version!r} "
                          f"(expected {SCHEMA_VERSION})", field="schema_version")
    return data


def resolve_config(preset: Optional[str] = None, config_path=None,
                   overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Merge defaults, preset, config file and explicit overrides (None values ignored)."""
    merged: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (available: {sorted(PRESETS)})",
                              field="preset")
        merged.update(PRESETS[preset])
    if config_path is not None:
        file_data = read_config_file(config_path)
        env_params = {**merged.get("env_params", {}), **file_data.pop("env_params", {})}
        merged.update(file_data)
        if env_params:
            merged["env_params"] = env_params
    for key, val in (overrides or {}).items():
        if val is not None:
            merged[key] = val
    cfg = validate_config(merged)
    logger.debug("Effective config: %s", cfg.model_dump())
    return cfg


def _drop_unset(val: Any) -> Any:
    if isinstance(val, Mapping):
        return {k: _drop_unset(v) for k, v in val.items() if v is not None}
    if isinstance(val, (list, tuple)):
        return [_drop_unset(v) for v in val]
    return val


def to_toml(cfg: RunConfig) -> str:
    """Effective config echo; unset optional fields are omitted."""
    try:
        return tomli_w.dumps(_drop_unset(cfg.model_dump()))
    except TypeError as exc:
        raise ConfigError(f"config cannot be written as TOML: {exc}", field="env_params") from exc
