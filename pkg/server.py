"""
Long-Range MFG MCP Server (FastMCP)

This file is the *entrypoint* for the local mean field game toolkit server.

Why this file exists:
- FastMCP discovers tools by importing this file and reading the `mcp` object.
- All `@mcp.tool()` functions defined here are exposed to MCP clients (LLMs / apps).
- The numerical work lives in `services/*`; tools remain thin wrappers around
  the same workflow functions that `cli.py` calls.

How to run (development):
- From the repo root (this folder contains server.py):
    uv run fastmcp dev server.py

If FastMCP cannot infer the server object, specify it explicitly:
    uv run fastmcp dev server.py:mcp

Configs:
- Every workflow reads one JSON experiment document (see `data/*.json`).
- The document schema is served via resource `mfg://config-schema`.

Tool Overview (what to call for what)
-------------------------------------

Equilibrium:
- solve_equilibrium(config_path, output_dir?, seed?)
    Solve the coupled HJB / Kolmogorov system; writes value.csv, flow.csv, policy.csv, summary.json.
- check_monotone(config_path, output_dir?, seed?)
    Sampled monotonicity check of F and G; writes monotone.json.

N-player game:
- simulate_players(config_path, output_dir?, threads?, seed?)
    Simulate N players under the equilibrium feedback; writes player_costs.csv, simulate.json.
- nash_gap(config_path, output_dir?, threads?, seed?)
    Per-player Nash gaps and epsilon-Nash summary; writes nash_gap.json, gaps.csv, sweep.csv.

Graphons:
- graphon_study(config_path, output_dir?, threads?, seed?)
    Cut norm of Bernoulli samples against the discretized kernel; writes cutnorm.csv.

Configs:
- normalize_config(config_path)
    Validate a config and return the fully defaulted document.
- list_example_configs()
    Example configs shipped in `data/`.

Every tool returns a dict with "status" ("ok", "not_converged", "not_monotone"
or "error") and "exit_code" (0, 2, 3 or 1 respectively).

Notes:
- This file uses ONLY absolute imports (no leading dots) because `fastmcp dev server.py`
  imports this as a standalone module (not a package), and relative imports would fail.

"""

from __future__ import annotations

import json
from typing import Any, Dict, Optional

from fastmcp import FastMCP

from config import DATA_DIR, DEFAULT_THREADS
from services.config_service import config_schema, load_config, normalized
from services.experiments_service import (
    cmd_check_monotone,
    cmd_graphon,
    cmd_nash_gap,
    cmd_simulate,
    cmd_solve,
)

# FastMCP server object discovered by the CLI.
mcp = FastMCP("LongRangeMFG")


# ---------- Equilibrium ----------
@mcp.tool()
def solve_equilibrium(config_path: str, output_dir: Optional[str] = None, seed: Optional[int] = None) -> Dict[str, Any]:
    """
    Solve the mean field game described by a config file.

    Args:
        config_path: Path to a JSON experiment config with a `model` block.
        output_dir: Directory for the artifacts (defaults to output.directory, then ./outputs).
        seed: Optional override for every seed in the config.

    Returns:
        {
          "status": "ok" | "not_converged",
          "exit_code": 0 | 2,
          "converged": ..., "iterations": ..., "final_residual": ...,
          "output_dir": "...",
          "files": ["value.csv", "flow.csv", "policy.csv", "summary.json", ...]
        }
        or {"status": "error", "message": "...", "exit_code": 1}
    """
    return cmd_solve(config_path, out=output_dir, seed=seed)


@mcp.tool()
def check_monotone(config_path: str, output_dir: Optional[str] = None, seed: Optional[int] = None) -> Dict[str, Any]:
    """
    Sample pairs of measures and check the monotonicity inequality for F and for G.

    Args:
        config_path: Path to a JSON experiment config with a `model` block.
        output_dir: Directory for monotone.json.
        seed: Optional override for the sampling seed.

    Returns:
        {"status": "ok" | "not_monotone", "exit_code": 0 | 3, "min_value": ..., ...}
        or error dict.
    """
    return cmd_check_monotone(config_path, out=output_dir, seed=seed)


# ---------- N-player game ----------
@mcp.tool()
def simulate_players(
    config_path: str,
    output_dir: Optional[str] = None,
    threads: int = DEFAULT_THREADS,
    seed: Optional[int] = None,
) -> Dict[str, Any]:
    """
    Simulate the N-player game under the equilibrium feedback.

    The equilibrium is solved first, or loaded when `simulation.equilibrium_from`
    points at the output directory of an earlier solve.

    Args:
        config_path: Path to a JSON experiment config.
        output_dir: Directory for player_costs.csv, simulate.json (and trajectories.csv).
        threads: Worker cap for the simulation blocks.
        seed: Optional override for every seed in the config.

    Returns:
        {"status": ..., "exit_code": ..., "runs": [{"n_players": ..., "mean_cost": ..., ...}], ...}
        or error dict.
    """
    return cmd_simulate(config_path, out=output_dir, threads=threads, seed=seed)


@mcp.tool()
def nash_gap(
    config_path: str,
    output_dir: Optional[str] = None,
    threads: int = DEFAULT_THREADS,
    seed: Optional[int] = None,
) -> Dict[str, Any]:
    """
    Estimate how far the equilibrium feedback is from a Nash equilibrium of the N-player game.

    Args:
        config_path: Path to a JSON experiment config; `simulation.n_players` may be a list (N-sweep).
        output_dir: Directory for nash_gap.json, gaps.csv, sweep.csv.
        threads: Worker cap for the simulation blocks.
        seed: Optional override for every seed in the config.

    Returns:
        {
          "status": ..., "exit_code": ...,
          "sweep": [{"n_players": ..., "epsilon_hat": ..., "quantile_gap": ..., ...}, ...]
        }
        or error dict.
    """
    return cmd_nash_gap(config_path, out=output_dir, threads=threads, seed=seed)


# ---------- Graphons ----------
@mcp.tool()
def graphon_study(
    config_path: str,
    output_dir: Optional[str] = None,
    threads: int = DEFAULT_THREADS,
    seed: Optional[int] = None,
) -> Dict[str, Any]:
    """
    Cut-norm convergence study for the kernel in the `graphon` block.

    Returns:
        {"status": "ok", "exit_code": 0, "files": ["cutnorm.csv"], "medians": [{"n": ..., "method": ..., "value": ...}]}
        or error dict.
    """
    return cmd_graphon(config_path, out=output_dir, threads=threads, seed=seed)


# ---------- Configs ----------
@mcp.tool()
def normalize_config(config_path: str) -> Dict[str, Any]:
    """
    Validate a config and return it with every default filled in.

    Returns:
        {"status": "ok", "config": {...}} or {"status": "error", "message": "..."}
    """
    try:
        return {"status": "ok", "config": normalized(load_config(config_path))}
    except Exception as e:
        return {"status": "error", "message": str(e), "exit_code": 1}


@mcp.tool()
def list_example_configs() -> Dict[str, Any]:
    """
    List the example configs shipped in `data/`.

    Returns:
        {"status": "ok", "configs": [{"name": "...", "path": "..."}, ...]}
    """
    paths = sorted(DATA_DIR.glob("*.json"))
    return {"status": "ok", "configs": [{"name": p.stem, "path": str(p)} for p in paths]}


# ---------- Resource ----------
@mcp.resource("mfg://config-schema", mime_type="application/json")
def experiment_config_schema() -> str:
    """
    Return the JSON schema of the experiment config document.

    Resource URI:
        mfg://config-schema
    """
    return json.dumps(config_schema(), indent=2)


def run() -> None:
    """
    Start the MCP server.
    """
    mcp.run()


if __name__ == "__main__":
    run()
