"""Ablation sweeps: one full train+decode pipeline per grid setting.

Axes mirror the method's knobs: top-k alignment (with an "NA" sentinel that
disables masking), training steps, the fusion second-input variant (plus
"off"), the dual head, and the fusion expansion dimension. Cells run in
worker threads, each owning its models and RNG streams; a cell's config
differs from the base only in the swept key, so fingerprints line up.
"""

from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import fingerprint, validate_config
from .pipeline import run_pipeline

AXES = ("topk", "steps", "tgf_variant", "teh", "expansion_dim")


def apply_setting(config: dict, axis: str, value) -> dict:
    """Return a copy of `config` with the swept key set to `value`."""
    out = copy.deepcopy(config)
    if axis == "topk":
        out["training"]["k"] = value
    elif axis == "steps":
        out["training"]["steps"] = int(value)
    elif axis == "tgf_variant":
        if value == "off":
            out["draft"]["use_tgf"] = False
        else:
            out["draft"]["use_tgf"] = True
            out["draft"]["tgf_second_input"] = str(value)
    elif axis == "teh":
        out["draft"]["use_teh"] = bool(value)
    elif axis == "expansion_dim":
        out["draft"]["expansion_dim"] = int(value)
    else:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    validate_config(out)
    return out


def _run_cell(axis: str, value, config: dict, out_dir: Path) -> dict:
    cell_dir = out_dir / f"{axis}_{value}"
    cell_dir.mkdir(parents=True, exist_ok=True)
    report = run_pipeline(config, cell_dir)
    return {
        "axis": axis,
        "setting": "NA" if value is None else str(value),
        "mean_tau": report.mean_tau,
        "modeled_sr": report.modeled_sr,
        "param_count": report.draft_param_count,
        "fingerprint": fingerprint(config),
        "seed": config["seed"],
    }


def run_ablation(axis: str, grid: list, base_config: dict, out_dir,
                 workers: int = 2) -> list[dict]:
    """Sweep `grid` along `axis`; returns one row per setting (grid order)
    and writes ablation.csv plus a figure into `out_dir`."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    if not grid:
        raise ValueError("ablation grid is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    configs = [apply_setting(base_config, axis, value) for value in grid]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(_run_cell, axis, value, cfg, out)
                   for value, cfg in zip(grid, configs)]
        rows = [f.result() for f in futures]
    from . import reporting

    reporting.write_ablation_csv(out / "ablation.csv", rows)
    reporting.render_ablation_figure(out / f"ablation_{axis}.png", axis, rows)
    return rows
