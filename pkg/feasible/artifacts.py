"""
feasible/artifacts.py

Run artifacts on disk.

    fields   CSV: '# key: value' header lines, then one value per line in flat
             cell-major order (masks as 0/1, V outside the region as nan)
    images   PGM P2 (ASCII), one pixel per cell, x to the right and the second
             state dimension upward
    reports  pydantic models dumped as indented JSON; no timestamps, so
             identical runs give identical bytes
    tables   MDP dumps: one CSV row per cell

Gray mappings:
    CDF      gray = round(255·(1 − F))              F = 0 white, F = 1 black
    value    gray = round(255·(V − min)/(max − min)) best value white, nan black
    mask     member 255, non-member 0
Annotated images squeeze data into 16..255 and paint region-boundary cells 0.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from feasible.mdp_core import FiniteMdp, GridSpec

logger = logging.getLogger(__name__)

BOUNDARY_GRAY = 0
ANNOTATED_FLOOR = 16


# ── Field CSV ────────────────────────────────────────────────────────────────

def _header_lines(header: Optional[Mapping]) -> list:
    lines = []
    for key, val in (header or {}).items():
        text = val if isinstance(val, str) else json.dumps(val, sort_keys=True)
        for part in str(text).splitlines() or [""]:
            lines.append(f"# {key}: {part}")
    return lines


def write_field_csv(path, values, header: Optional[Mapping] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vals = np.asarray(values)
    if vals.dtype == bool:
        vals = vals.astype(np.int64)
    with open(path, "w", newline="") as fh:
        for line in _header_lines(header):
            fh.write(line + "\n")
        pd.Series(vals.ravel()).to_csv(fh, header=False, index=False,
                                      float_format="%.17g", na_rep="nan")
    return path


def read_header(path) -> Dict[str, str]:
    """
    Leading '# key: value' lines as {key: text}; repeated keys are joined by
    newlines. A PGM magic number before the comments is skipped.
    """
    header: Dict[str, str] = {}
    with open(path) as fh:
        for i, line in enumerate(fh):
            if i == 0 and line.strip() == "P2":
                continue
            if not line.startswith("#"):
                break
            key, _, text = line[1:].rstrip("\n").lstrip().partition(":")
            text = text[1:] if text.startswith(" ") else text
            header[key] = f"{header[key]}\n{text}" if key in header else text
    return header


def read_field_csv(path) -> Tuple[np.ndarray, Dict[str, str]]:
    path   = Path(path)
    header = read_header(path)
    try:
        frame = pd.read_csv(path, comment="#", header=None, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        return np.empty(0), header
    return frame[0].to_numpy(), header


# ── PGM images ───────────────────────────────────────────────────────────────

def _as_image(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    if grid.ndim != 2:
        raise ValueError(f"images need a 2-D grid, got {grid.ndim} dimensions")
    nx, ny = grid.cells
    # rows run from the top (largest second coordinate) down
    return np.asarray(values).reshape(nx, ny).T[::-1]


def write_pgm(path, gray: np.ndarray, comments: Iterable[str] = (),
              header: Optional[Mapping] = None) -> Path:
    """ASCII PGM; header entries and comments go into '#' lines after the magic number."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gray = np.asarray(gray, dtype=np.int64)
    rows, cols = gray.shape
    with open(path, "w", newline="\n") as fh:
        fh.write("P2\n")
        for line in _header_lines(header):
            fh.write(line + "\n")
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write(f"{cols} {rows}\n255\n")
        for row in gray:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")
    return path


def read_pgm(path) -> np.ndarray:
    tokens = []
    with open(path) as fh:
        for line in fh:
            tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM (P2) file")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.asarray([int(t) for t in tokens[4:]], dtype=np.int64)
    if data.size != rows * cols or data.max(initial=0) > maxval:
        raise ValueError(f"{path}: pixel data does not match a {cols}x{rows} image")
    return data.reshape(rows, cols)


def cdf_gray(F: np.ndarray) -> np.ndarray:
    return np.rint(255.0 * (1.0 - np.clip(F, 0.0, 1.0))).astype(np.int64)


def value_gray(V: np.ndarray) -> np.ndarray:
    V      = np.asarray(V, dtype=np.float64)
    finite = np.isfinite(V)
    if not finite.any():
        return np.zeros(V.shape, dtype=np.int64)
    lo, hi = V[finite].min(), V[finite].max()
    scaled = np.ones(V.shape) if hi == lo else (V - lo) / (hi - lo)
    return np.where(finite, np.rint(255.0 * np.where(finite, scaled, 0.0)), 0).astype(np.int64)


def mask_gray(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.int64)


def boundary_cells(mask: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Member cells with at least one axis neighbour outside the mask."""
    m   = np.asarray(mask, dtype=bool).reshape(grid.cells)
    out = np.zeros_like(m)
    for axis in range(m.ndim):
        for shift in (1, -1):
            nb = np.roll(m, shift, axis=axis)
            # no wrap-around: the grid edge is not a boundary by itself
            edge = [slice(None)] * m.ndim
            edge[axis] = 0 if shift == 1 else -1
            nb[tuple(edge)] = True
            out |= m & ~nb
    return out.ravel()


def annotate(gray: np.ndarray, boundary: Optional[np.ndarray]) -> np.ndarray:
    """Squeeze 0..255 into 16..255 and mark boundary cells 0 (flat cell order)."""
    g = ANNOTATED_FLOOR + np.rint(gray * (255 - ANNOTATED_FLOOR) / 255.0).astype(np.int64)
    if boundary is not None:
        g = np.where(boundary, BOUNDARY_GRAY, g)
    return g


def write_field_pgm(path, gray_flat: np.ndarray, grid: GridSpec,
                    comments: Iterable[str] = (), header: Optional[Mapping] = None) -> Path:
    return write_pgm(path, _as_image(gray_flat, grid), comments, header)


# ── Reports and tables ───────────────────────────────────────────────────────

def write_report(path, model: BaseModel, header: Optional[Mapping] = None) -> Path:
    """Indented JSON of `model`; a non-empty header is stored under "header" first."""
    path    = Path(path)
    payload = json.loads(model.model_dump_json())
    if header:
        payload = {"header": dict(header), **payload}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


def dump_mdp_table(mdp: FiniteMdp, path, header: Optional[Mapping] = None) -> Path:
    """One row per cell: cell, succ_<a>..., reward_<a>..., violation."""
    A     = mdp.n_actions
    frame = pd.DataFrame({"cell": np.arange(mdp.n_cells)})
    for a in range(A):
        frame[f"succ_{a}"] = mdp.successor[:, a]
    for a in range(A):
        frame[f"reward_{a}"] = mdp.reward[:, a]
    frame["violation"] = mdp.violation.astype(np.int64)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in _header_lines({"gamma": mdp.gamma, "name": mdp.name, **dict(header or {})}):
            fh.write(line + "\n")
        frame.to_csv(fh, index=False, float_format="%.17g")
    logger.info("Wrote MDP table (%d cells x %d actions) → %s", mdp.n_cells, A, path)
    return path


def load_mdp_table(path) -> FiniteMdp:
    header = read_header(path)
    frame  = pd.read_csv(path, comment="#", float_precision="round_trip")
    succ  = frame[[c for c in frame.columns if c.startswith("succ_")]].to_numpy()
    rew   = frame[[c for c in frame.columns if c.startswith("reward_")]].to_numpy()
    gamma = float(json.loads(header.get("gamma", "0.99")))
    name  = header.get("name", "table")
    return FiniteMdp.from_tables(succ, rew, frame["violation"].to_numpy(), gamma, name=name)
