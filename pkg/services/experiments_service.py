from __future__ import annotations

import logging
import time
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from services.config_service import (
    ExperimentConfig,
    apply_seed_override,
    build_kernel,
    build_layout,
    build_model,
    build_solver_config,
    load_config,
    normalized,
)
from services.graphon_service import cut_norm_study, sample_bernoulli_graph, step_kernel
from services.interactions_service import InteractionSpec, TwoBodyInteraction
from services.io_service import load_equilibrium, resolve_output_dir, write_csv, write_equilibrium, write_json
from services.nplayer_service import (
    SimConfig,
    build_player_feedback,
    estimate_costs,
    nash_gap_report,
    simulate,
)
from services.solver_service import EquilibriumResult, MfgModel, check_monotonicity, solve_mfg
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NOT_CONVERGED = 2
EXIT_NOT_MONOTONE = 3


def _error(e: Exception) -> Dict[str, Any]:
    logger.error("%s", e)
    return {"status": "error", "message": str(e), "exit_code": EXIT_INVALID}


def _timing(seconds: float) -> Dict[str, Any]:
    return {"seconds": seconds, "finished_at": datetime.now(timezone.utc).isoformat(timespec="seconds")}


def _load(config_path: str, seed: Optional[int]) -> ExperimentConfig:
    return apply_seed_override(load_config(config_path), seed)


def _equilibrium(config: ExperimentConfig, model: MfgModel) -> Tuple[EquilibriumResult, str]:
    source = config.simulation.equilibrium_from
    if source:
        logger.info("loading equilibrium from %s", source)
        return load_equilibrium(source, model), "loaded"
    return solve_mfg(model, build_solver_config(config.solver)), "solved"


def _player_specs(config: ExperimentConfig, model: MfgModel, n_players: int) -> Tuple[InteractionSpec, InteractionSpec]:
    """F_N and G_N: the limit specs, or two-body specs with a sampled K^N in place of K."""
    if config.simulation.player_kernel == "limit":
        return model.F, model.G
    specs = []
    for spec in (model.F, model.G):
        if isinstance(spec, TwoBodyInteraction):
            sampled = sample_bernoulli_graph(spec.kernel, n_players, config.simulation.seed)
            spec = TwoBodyInteraction(step_kernel(sampled), spec.f)
        specs.append(spec)
    if specs[0] is model.F and specs[1] is model.G:
        raise ConfigError("player_kernel = bernoulli needs a two_body F or G")
    return specs[0], specs[1]


def _sim_config(config: ExperimentConfig, n_players: int, threads: int) -> SimConfig:
    block = config.simulation
    return SimConfig(
        layout=build_layout(block, n_players),
        n_runs=block.n_runs,
        seed=block.seed,
        block_size=block.block_size,
        threads=threads,
        rate_cap=config.solver.rate_cap,
    )


# ---------- workflows ----------
def cmd_solve(config_path: str, out: Optional[str] = None, threads: int = 1, seed: Optional[int] = None) -> Dict[str, Any]:
    """
    Solve the MFG system and write value.csv, flow.csv, policy.csv, summary.json.

    exit_code: 0 converged, 2 not converged, 1 invalid input.
    """
    try:
        config = _load(config_path, seed)
        model = build_model(config.require_model())
        solver = build_solver_config(config.solver)
        start = time.perf_counter()
        result = solve_mfg(model, solver)
        seconds = time.perf_counter() - start
        out_dir = resolve_output_dir(out, config.output.directory)
        files = write_equilibrium(
            result,
            model,
            out_dir,
            config.output.formats,
            {"config": normalized(config), "timing": _timing(seconds)},
        )
        return {
            "status": "ok" if result.converged else "not_converged",
            "exit_code": EXIT_OK if result.converged else EXIT_NOT_CONVERGED,
            "converged": result.converged,
            "iterations": result.iterations,
            "final_residual": result.residual,
            "output_dir": str(out_dir),
            "files": files,
        }
    except Exception as e:
        return _error(e)


def cmd_simulate(config_path: str, out: Optional[str] = None, threads: int = 1, seed: Optional[int] = None) -> Dict[str, Any]:
    """Simulate the N-player game under the equilibrium feedback; writes player_costs.csv, simulate.json."""
    try:
        config = _load(config_path, seed)
        model = build_model(config.require_model())
        start = time.perf_counter()
        result, origin = _equilibrium(config, model)
        cost_frames: List[pd.DataFrame] = []
        path_frames: List[pd.DataFrame] = []
        runs: List[Dict[str, Any]] = []
        for n_players in config.simulation.player_counts:
            F_N, G_N = _player_specs(config, model, n_players)
            sim = _sim_config(config, n_players, threads)
            feedback = build_player_feedback(result.policy, sim.layout, model.atlas)
            batch = simulate(sim, feedback, model.grid, model.m0)
            estimate = estimate_costs(batch, feedback, model.cost, F_N, G_N, model.atlas)
            parts = estimate.components()
            cost_frames.append(
                pd.DataFrame(
                    {
                        "n_players": n_players,
                        "player": np.arange(1, n_players + 1),
                        "position": sim.layout.positions,
                        "cost": estimate.mean,
                        "standard_error": estimate.standard_error,
                        "running": parts["running"],
                        "interaction": parts["interaction"],
                        "terminal": parts["terminal"],
                    }
                )
            )
            if config.simulation.save_trajectories:
                frame = batch.to_frame()
                frame.insert(0, "n_players", n_players)
                path_frames.append(frame)
            runs.append(
                {
                    "n_players": n_players,
                    "n_runs": batch.n_runs,
                    "n_jumps": batch.n_events,
                    "mean_cost": float(estimate.mean.mean()),
                    "max_marginal_tv": _marginal_tv(batch, result, feedback, model),
                }
            )
        seconds = time.perf_counter() - start

        out_dir = resolve_output_dir(out, config.output.directory)
        files = [write_csv(pd.concat(cost_frames, ignore_index=True), out_dir / "player_costs.csv").name]
        if path_frames:
            files.append(write_csv(pd.concat(path_frames, ignore_index=True), out_dir / "trajectories.csv").name)
        write_json(
            out_dir / "simulate.json",
            {
                "equilibrium": {"origin": origin, **result.summary()},
                "runs": runs,
                "timing": _timing(seconds),
            },
        )
        files.append("simulate.json")
        return {
            "status": "ok" if result.converged else "not_converged",
            "exit_code": EXIT_OK if result.converged else EXIT_NOT_CONVERGED,
            "output_dir": str(out_dir),
            "files": files,
            "runs": runs,
        }
    except Exception as e:
        return _error(e)


def _marginal_tv(batch, result: EquilibriumResult, feedback, model: MfgModel) -> float:
    """Largest total-variation distance between the run-empirical law of X_i(T) and m(T, cell_i)."""
    final = batch.states_at(model.grid.horizon)
    empirical = np.stack([np.mean(final == x, axis=0) for x in range(model.d)], axis=-1)
    limit = result.flow.values[-1][feedback.cells]
    return float(0.5 * np.abs(empirical - limit).sum(axis=1).max())


def cmd_nash_gap(config_path: str, out: Optional[str] = None, threads: int = 1, seed: Optional[int] = None) -> Dict[str, Any]:
    """Estimate per-player Nash gaps for every N in simulation.n_players; writes nash_gap.json, gaps.csv, sweep.csv."""
    try:
        config = _load(config_path, seed)
        model = build_model(config.require_model())
        block = config.simulation
        start = time.perf_counter()
        result, origin = _equilibrium(config, model)
        reports = []
        gap_frames: List[pd.DataFrame] = []
        sweep_rows: List[Dict[str, Any]] = []
        for n_players in block.player_counts:
            F_N, G_N = _player_specs(config, model, n_players)
            report = nash_gap_report(
                result,
                model,
                _sim_config(config, n_players, threads),
                block.epsilon_grid,
                F_player=F_N,
                G_player=G_N,
                cost_estimator=block.cost_estimator,
                best_response=block.best_response,
                quantile=block.quantile,
            )
            reports.append(report.to_dict())
            frame = report.to_frame()
            frame.insert(0, "n_players", n_players)
            gap_frames.append(frame)
            sweep_rows.append(
                {
                    "n_players": n_players,
                    "epsilon_hat": report.epsilon_hat,
                    "quantile_gap": report.quantile_gap,
                    "mean_gap": float(report.gaps.mean()),
                    "max_standard_error": (
                        float(report.standard_errors.max()) if report.standard_errors is not None else None
                    ),
                }
            )
        seconds = time.perf_counter() - start

        out_dir = resolve_output_dir(out, config.output.directory)
        write_csv(pd.concat(gap_frames, ignore_index=True), out_dir / "gaps.csv")
        write_csv(pd.DataFrame(sweep_rows), out_dir / "sweep.csv")
        write_json(
            out_dir / "nash_gap.json",
            {
                "equilibrium": {"origin": origin, **result.summary()},
                "reports": reports,
                "timing": _timing(seconds),
            },
        )
        return {
            "status": "ok" if result.converged else "not_converged",
            "exit_code": EXIT_OK if result.converged else EXIT_NOT_CONVERGED,
            "output_dir": str(out_dir),
            "files": ["gaps.csv", "sweep.csv", "nash_gap.json"],
            "sweep": sweep_rows,
        }
    except Exception as e:
        return _error(e)


def cmd_graphon(config_path: str, out: Optional[str] = None, threads: int = 1, seed: Optional[int] = None) -> Dict[str, Any]:
    """Cut norm of Bernoulli samples against the discretized kernel; writes cutnorm.csv."""
    try:
        config = _load(config_path, seed)
        block = config.graphon
        kernel = build_kernel(block.kernel)
        frame = cut_norm_study(
            kernel,
            block.sizes,
            block.seeds,
            restarts=block.restarts,
            exact_up_to=block.exact_up_to,
            include_continuum=block.include_continuum,
            threads=threads,
        )
        out_dir = resolve_output_dir(out, config.output.directory)
        write_csv(frame, out_dir / "cutnorm.csv")
        medians = frame.groupby(["n", "method"], sort=True)["value"].median().reset_index()
        return {
            "status": "ok",
            "exit_code": EXIT_OK,
            "output_dir": str(out_dir),
            "files": ["cutnorm.csv"],
            "medians": medians.to_dict(orient="records"),
        }
    except Exception as e:
        return _error(e)


def cmd_check_monotone(config_path: str, out: Optional[str] = None, threads: int = 1, seed: Optional[int] = None) -> Dict[str, Any]:
    """Sampled monotonicity check of F and of G, each on its own; exit 3 when either fails."""
    try:
        config = _load(config_path, seed)
        model = build_model(config.require_model())
        block = config.monotonicity
        reports = {
            name: check_monotonicity(spec, model.atlas, block.n_samples, block.seed, model.d)
            for name, spec in (("F", model.F), ("G", model.G))
        }
        monotone = all(r.monotone for r in reports.values())
        payload = {
            "monotone": monotone,
            "min_value": min(r.min_value for r in reports.values()),
            "n_samples": block.n_samples,
            **{name: r.to_dict() for name, r in reports.items()},
        }
        out_dir = resolve_output_dir(out, config.output.directory)
        write_json(out_dir / "monotone.json", payload)
        if not monotone:
            logger.warning("monotonicity check failed (min value %.3e)", payload["min_value"])
        return {
            "status": "ok" if monotone else "not_monotone",
            "exit_code": EXIT_OK if monotone else EXIT_NOT_MONOTONE,
            "output_dir": str(out_dir),
            "files": ["monotone.json"],
            "min_value": payload["min_value"],
        }
    except Exception as e:
        return _error(e)


WORKFLOWS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "nash-gap": cmd_nash_gap,
    "graphon": cmd_graphon,
    "check-monotone": cmd_check_monotone,
}
