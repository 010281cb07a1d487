#!/usr/bin/env python3
"""
Generate the example experiment configs shipped in data/.

Each config is a plain JSON document validated by services.config_service;
run any of them with

    uv run python cli.py <command> data/<name>.json

Configs written:
- two_state_monotone   2 states, one cell, F(x,m) = m_x, potential (0, 1)
- anti_monotone        same with F(x,m) = -m_x (check-monotone exits 3)
- two_body_average     K(u,v) = (u+v)/2, f = identity, N-sweep 10 -> 200
- bernoulli_graph      same kernel, players interact through a sampled graph
- low_res_power        low-resolution interaction with a quadratic f
- quartic_cost         quadratic + quartic running cost, implicit Euler
- graphon_average      cut-norm study of K(u,v) = (u+v)/2
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path
from typing import Any, Dict, List

IDENTITY = [[1.0, 0.0], [0.0, 1.0]]
MINUS_IDENTITY = [[-1.0, 0.0], [0.0, -1.0]]


def linear_m0(n_cells: int) -> List[List[float]]:
    """m0(u) = (u, 1 - u) on cells k/M."""
    return [[round(k / n_cells, 6), round(1 - k / n_cells, 6)] for k in range(1, n_cells + 1)]


def two_state_model(f: List[List[float]]) -> Dict[str, Any]:
    return {
        "states": 2,
        "horizon": 1.0,
        "n_steps": 100,
        "atlas": {"kind": "uniform", "n_cells": 1},
        "cost": {"kind": "quadratic", "theta": {"kind": "constant", "value": 1.0}, "potential": {"base": [0.0, 1.0]}},
        "F": {"kind": "local", "f": f},
        "G": {"kind": "zero"},
        "m0": [0.5, 0.5],
    }


def two_state_monotone() -> Dict[str, Any]:
    return {
        "model": two_state_model(IDENTITY),
        "solver": {"tolerance": 1e-8},
        "monotonicity": {"n_samples": 1000, "seed": 0},
        "output": {"directory": "outputs/two_state_monotone"},
    }


def anti_monotone() -> Dict[str, Any]:
    return {
        "model": two_state_model(MINUS_IDENTITY),
        "monotonicity": {"n_samples": 1000, "seed": 0},
        "output": {"directory": "outputs/anti_monotone"},
    }


def average_model(n_cells: int = 20) -> Dict[str, Any]:
    return {
        "states": 2,
        "horizon": 1.0,
        "n_steps": 100,
        "atlas": {"kind": "uniform", "n_cells": n_cells, "placement": "right"},
        "cost": {"kind": "quadratic"},
        "F": {"kind": "two_body", "kernel": {"name": "average"}, "f": IDENTITY},
        "G": {"kind": "zero"},
        "m0": linear_m0(n_cells),
    }


def two_body_average() -> Dict[str, Any]:
    return {
        "model": average_model(),
        "solver": {"damping": 0.5, "tolerance": 1e-8},
        "simulation": {
            "n_players": [10, 50, 200],
            "positions": "grid",
            "n_runs": 200,
            "seed": 0,
            "cost_estimator": "policy_evaluation",
            "best_response": "exact",
            "epsilon_grid": [0.001, 0.01, 0.1],
        },
        "output": {"directory": "outputs/two_body_average"},
    }


def bernoulli_graph() -> Dict[str, Any]:
    return {
        "model": average_model(),
        "simulation": {
            "n_players": 50,
            "n_runs": 500,
            "seed": 0,
            "player_kernel": "bernoulli",
            "cost_estimator": "monte_carlo",
            "save_trajectories": False,
        },
        "output": {"directory": "outputs/bernoulli_graph"},
    }


def low_res_power() -> Dict[str, Any]:
    return {
        "model": {
            "states": 2,
            "horizon": 1.0,
            "n_steps": 50,
            "atlas": {"kind": "uniform", "n_cells": 10},
            "cost": {"kind": "quadratic"},
            "F": {
                "kind": "low_res",
                "kernel": {"name": "gaussian", "bandwidth": 0.2},
                "smoothing": {"name": "indicator_band", "width": 0.2},
                "f_low_res": {"kind": "power", "exponent": 2.0, "scale": 1.0},
            },
            "G": {"kind": "zero"},
            "m0": linear_m0(10),
        },
        "solver": {"mode": "fictitious_play", "max_iterations": 400, "tolerance": 1e-6},
        "simulation": {"n_players": 20, "n_runs": 400, "best_response": "heuristic"},
        "output": {"directory": "outputs/low_res_power"},
    }


def quartic_cost() -> Dict[str, Any]:
    return {
        "model": {
            "states": 2,
            "horizon": 1.0,
            "n_steps": 100,
            "atlas": {"kind": "uniform", "n_cells": 5, "placement": "midpoint"},
            "cost": {
                "kind": "quadratic_quartic",
                "kappa": 0.5,
                "theta": {"kind": "affine", "intercept": 1.0, "slope": 0.5},
                "potential": {"base": [0.0, 1.0], "slope": [0.5, 0.0]},
            },
            "F": {"kind": "local", "f": IDENTITY},
            "G": {"kind": "two_body", "kernel": {"name": "constant", "value": 1.0}, "f": IDENTITY},
            "m0": [0.5, 0.5],
        },
        "solver": {"integrator": "implicit_euler"},
        "output": {"directory": "outputs/quartic_cost", "formats": ["csv", "json", "excel"]},
    }


def graphon_average() -> Dict[str, Any]:
    return {
        "graphon": {
            "kernel": {"name": "average"},
            "sizes": [8, 32, 128, 256],
            "seeds": list(range(20)),
            "restarts": 16,
            "exact_up_to": 10,
            "include_continuum": True,
        },
        "output": {"directory": "outputs/graphon_average"},
    }


EXAMPLES = {
    "two_state_monotone": two_state_monotone,
    "anti_monotone": anti_monotone,
    "two_body_average": two_body_average,
    "bernoulli_graph": bernoulli_graph,
    "low_res_power": low_res_power,
    "quartic_cost": quartic_cost,
    "graphon_average": graphon_average,
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data"), help="Output directory")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, build in EXAMPLES.items():
        path = out / f"{name}.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(build(), f, indent=2)
            f.write("\n")
        print(f"Wrote {path}")


if __name__ == "__main__":
    main()
