from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import DEFAULT_BLOCK_SIZE, DEFAULT_RATE_CAP
from services.costs_service import CostModel
from services.interactions_service import InteractionSpec, LinearInteraction, ZeroInteraction
from services.solver_service import (
    EquilibriumResult,
    MfgModel,
    evaluate_policy,
    integrate_hjb,
    policy_from_value,
    propagate,
)
from utils import streams
from utils.errors import ConfigError, NonlinearInteractionError, RateCapError
from utils.fields import MeasureFlow, Policy, ValueField
from utils.grids import PlayerLayout, PositionAtlas, TimeGrid

logger = logging.getLogger(__name__)

CostEstimator = Literal["monte_carlo", "policy_evaluation"]
BestResponseMode = Literal["exact", "heuristic"]
TestFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]

DEVIATION_CLASS = "Markov feedbacks in (t, own state) against the mixed opponent flow"


@dataclass(frozen=True)
class SimConfig:
    layout: PlayerLayout
    n_runs: int
    seed: int = 0
    initial_laws: Optional[np.ndarray] = None
    block_size: int = DEFAULT_BLOCK_SIZE
    threads: int = 1
    rate_cap: float = DEFAULT_RATE_CAP

    def __post_init__(self) -> None:
        if self.n_runs < 1:
            raise ConfigError(f"n_runs must be >= 1, got {self.n_runs}")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")


@dataclass(frozen=True)
class PlayerFeedback:
    """Per-player jump rates alpha^{N,i}(t_k, x -> y), shape (n_steps + 1, N, d, d)."""

    rates: np.ndarray
    cells: np.ndarray
    positions: np.ndarray

    @property
    def n_players(self) -> int:
        return int(self.rates.shape[1])

    @property
    def d(self) -> int:
        return int(self.rates.shape[-1])


def build_player_feedback(
    policy: Policy | ValueField,
    layout: PlayerLayout,
    atlas: PositionAtlas,
    cost: Optional[CostModel] = None,
) -> PlayerFeedback:
    """Equilibrium rates at each player's position, by nearest-cell lookup."""
    if isinstance(policy, ValueField):
        if cost is None:
            raise ConfigError("a value field needs its cost model to derive rates")
        policy = policy_from_value(cost, policy, atlas)
    if atlas.size == 0:
        raise ConfigError("cannot build feedbacks on an empty atlas")
    cells = atlas.nearest(layout.positions)
    rates = np.ascontiguousarray(policy.rates[:, cells])
    rates.setflags(write=False)
    return PlayerFeedback(rates, cells, layout.positions)


def default_initial_laws(m0: np.ndarray, feedback: PlayerFeedback) -> np.ndarray:
    """m0 at each player's nearest atlas cell."""
    return np.asarray(m0, dtype=float)[feedback.cells]


# ---------- trajectories ----------
@dataclass(frozen=True)
class TrajectoryBatch:
    """
    Jump events of every (run, player) path, sorted by run, player, time.

    Internal states are 0-based; `to_frame` writes them as 1..d.
    """

    initial_states: np.ndarray
    run: np.ndarray
    player: np.ndarray
    time: np.ndarray
    state: np.ndarray
    grid: TimeGrid

    @property
    def n_runs(self) -> int:
        return int(self.initial_states.shape[0])

    @property
    def n_players(self) -> int:
        return int(self.initial_states.shape[1])

    @property
    def n_events(self) -> int:
        return int(self.time.size)

    def states_at(self, t: float) -> np.ndarray:
        """State of every (run, player) at time t, shape (n_runs, N)."""
        states = np.array(self.initial_states)
        idx = np.flatnonzero(self.time <= t)
        if idx.size:
            keys = self.run[idx] * self.n_players + self.player[idx]
            last = np.r_[keys[1:] != keys[:-1], True]
            states.reshape(-1)[keys[last]] = self.state[idx[last]]
        return states

    def path(self, r: int, i: int) -> List[Tuple[float, int]]:
        mask = (self.run == r) & (self.player == i)
        return [(0.0, int(self.initial_states[r, i]))] + list(
            zip(self.time[mask].tolist(), self.state[mask].tolist())
        )

    def to_frame(self) -> pd.DataFrame:
        """Columnar form (run, player, time, state): one row per path start plus one per jump."""
        runs, players = np.indices(self.initial_states.shape)
        frame = pd.DataFrame(
            {
                "run": np.concatenate([runs.reshape(-1), self.run]) + 1,
                "player": np.concatenate([players.reshape(-1), self.player]) + 1,
                "time": np.concatenate([np.zeros(self.initial_states.size), self.time]),
                "state": np.concatenate([self.initial_states.reshape(-1), self.state]) + 1,
            }
        )
        return frame.sort_values(["run", "player", "time"], kind="stable").reset_index(drop=True)


def _sample_states(rng: np.random.Generator, laws: np.ndarray, n_runs: int) -> np.ndarray:
    cum = np.cumsum(laws, axis=1)
    u = rng.random((n_runs, laws.shape[0]))
    states = (cum[None, :, :] < u[..., None] * cum[None, :, -1:]).sum(axis=-1)
    return np.minimum(states, laws.shape[1] - 1)


def _simulate_block(rates: np.ndarray, laws: np.ndarray, grid: TimeGrid, seed: int, block: int, first_run: int, n_runs: int):
    """
    Exact CTMC paths for one block of runs. Within a slab the rates are
    constant, so exponential clocks are exact; clocks are redrawn at every
    slab boundary.
    """
    init_rng = streams.stream(seed, streams.INITIAL_STATES, block)
    rng = streams.stream(seed, streams.SIMULATION, block)
    x0 = _sample_states(init_rng, laws, n_runs)
    x = x0.copy()
    n_players = laws.shape[0]
    player_index = np.broadcast_to(np.arange(n_players), x.shape)
    run_index = np.broadcast_to(np.arange(n_runs)[:, None], x.shape)
    events: List[Tuple[np.ndarray, ...]] = []
    times = grid.times
    for k in range(grid.n_steps):
        slab_rates = rates[k]
        now = np.full(x.shape, times[k])
        active = np.ones(x.shape, dtype=bool)
        while True:
            rows = slab_rates[player_index[active], x[active]]
            total = rows.sum(axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                wait = rng.exponential(size=total.size) / total
            t_next = now[active] + wait
            jumped = t_next < times[k + 1]
            if not jumped.any():
                break
            cum = np.cumsum(rows[jumped], axis=1)
            u = 1.0 - rng.random(cum.shape[0])
            target = np.minimum((cum < u[:, None] * cum[:, -1:]).sum(axis=1), laws.shape[1] - 1)
            where = tuple(axis[jumped] for axis in np.nonzero(active))
            x[where] = target
            now[where] = t_next[jumped]
            events.append((run_index[where] + first_run, player_index[where], t_next[jumped], target))
            active = np.zeros(x.shape, dtype=bool)
            active[where] = True
    return x0, events


def simulate(
    config: SimConfig,
    feedback: PlayerFeedback,
    grid: TimeGrid,
    m0: Optional[np.ndarray] = None,
) -> TrajectoryBatch:
    """
    Simulate n_runs independent copies of the N-player jump process.

    Runs are split in blocks of `block_size`; block b draws from the streams
    keyed by (seed, b), so the batch does not depend on the thread count.
    """
    if feedback.rates.shape[0] != grid.n_steps + 1:
        raise ConfigError("feedback time axis does not match the time grid")
    if feedback.n_players != config.layout.n_players:
        raise ConfigError("feedback and layout disagree on the number of players")
    peak = float(feedback.rates.max()) if feedback.rates.size else 0.0
    if peak > config.rate_cap:
        raise RateCapError(f"player rate {peak:.3e} exceeds the cap {config.rate_cap:.3e}")
    if config.initial_laws is not None:
        laws = np.asarray(config.initial_laws, dtype=float)
    elif m0 is not None:
        laws = default_initial_laws(m0, feedback)
    else:
        raise ConfigError("simulation needs initial laws or m0")
    if laws.shape != (feedback.n_players, feedback.d):
        raise ConfigError(f"initial laws must be ({feedback.n_players}, {feedback.d}), got {laws.shape}")

    starts = list(range(0, config.n_runs, config.block_size))
    jobs = [(b, first, min(config.block_size, config.n_runs - first)) for b, first in enumerate(starts)]

    def run(job):
        return _simulate_block(feedback.rates, laws, grid, config.seed, *job)

    if config.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as executor:
            results = list(executor.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    initial = np.concatenate([x0 for x0, _ in results], axis=0)
    chunks = [chunk for _, events in results for chunk in events]
    if chunks:
        run_ids, players, times, states = (np.concatenate(parts) for parts in zip(*chunks))
    else:
        run_ids = players = states = np.zeros(0, dtype=np.int64)
        times = np.zeros(0)
    order = np.lexsort((times, players, run_ids))
    logger.info("simulated %d runs of %d players (%d jumps)", config.n_runs, feedback.n_players, times.size)
    return TrajectoryBatch(
        initial_states=initial,
        run=run_ids[order].astype(np.int64),
        player=players[order].astype(np.int64),
        time=times[order],
        state=states[order].astype(np.int64),
        grid=grid,
    )


# ---------- cost estimation ----------
@dataclass(frozen=True)
class CostEstimate:
    """Per-run, per-player realised costs and their run averages."""

    running: np.ndarray
    interaction: np.ndarray
    terminal: np.ndarray

    @property
    def per_run(self) -> np.ndarray:
        return self.running + self.interaction + self.terminal

    @property
    def mean(self) -> np.ndarray:
        return self.per_run.mean(axis=0)

    @property
    def standard_error(self) -> np.ndarray:
        n_runs = self.per_run.shape[0]
        if n_runs < 2:
            return np.zeros(self.per_run.shape[1])
        return self.per_run.std(axis=0, ddof=1) / np.sqrt(n_runs)

    def components(self) -> Dict[str, np.ndarray]:
        return {
            "running": self.running.mean(axis=0),
            "interaction": self.interaction.mean(axis=0),
            "terminal": self.terminal.mean(axis=0),
        }


def _running_cost_table(cost: CostModel, feedback: PlayerFeedback, grid: TimeGrid) -> Tuple[np.ndarray, np.ndarray]:
    """Per-slab running cost L (n_steps, N, d) and its integral up to each t_k (n_steps + 1, N, d)."""
    per_slab = np.stack(
        [cost.running_cost_field(feedback.rates[k], feedback.positions) for k in range(grid.n_steps)]
    )
    cumulative = np.concatenate([np.zeros((1, *per_slab.shape[1:])), np.cumsum(per_slab * grid.dt, axis=0)])
    return per_slab, cumulative


def _segments(batch: TrajectoryBatch) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Holding intervals of every path: key = run * N + player, start, end, state."""
    n = batch.n_players
    init_keys = np.arange(batch.initial_states.size)
    keys = np.concatenate([init_keys, batch.run * n + batch.player])
    starts = np.concatenate([np.zeros(init_keys.size), batch.time])
    states = np.concatenate([batch.initial_states.reshape(-1), batch.state])
    order = np.lexsort((starts, keys))
    keys, starts, states = keys[order], starts[order], states[order]
    ends = np.r_[starts[1:], batch.grid.horizon]
    last = np.r_[keys[1:] != keys[:-1], True]
    ends[last] = batch.grid.horizon
    return keys, starts, ends, states


def _integrated_running(batch: TrajectoryBatch, per_slab: np.ndarray, cumulative: np.ndarray) -> np.ndarray:
    grid = batch.grid
    keys, starts, ends, states = _segments(batch)
    players = keys % batch.n_players

    def antiderivative(t: np.ndarray) -> np.ndarray:
        k = grid.slab_index(t)
        return cumulative[k, players, states] + (t - k * grid.dt) * per_slab[k, players, states]

    totals = np.bincount(keys, weights=antiderivative(ends) - antiderivative(starts), minlength=batch.initial_states.size)
    return totals.reshape(batch.initial_states.shape)


def _integrated_interaction(batch: TrajectoryBatch, spec: InteractionSpec, positions: np.ndarray, atlas: PositionAtlas, d: int) -> np.ndarray:
    """int_0^T F_N(X_i(t), m^{N,i}_X(t), u_i) dt per run, on the merged jump timeline of each run."""
    out = np.zeros(batch.initial_states.shape)
    if isinstance(spec, ZeroInteraction):
        return out
    n = batch.n_players
    bounds = np.searchsorted(batch.run, np.arange(batch.n_runs + 1))
    f_matrix = np.asarray(spec.f, dtype=float) if isinstance(spec, LinearInteraction) else None
    weights = spec.opponent_matrix(positions, atlas) if isinstance(spec, LinearInteraction) else None
    eye = np.eye(d)
    for r in range(batch.n_runs):
        lo, hi = bounds[r], bounds[r + 1]
        order = lo + np.argsort(batch.time[lo:hi], kind="stable")
        who, new, when = batch.player[order], batch.state[order], batch.time[order]
        # joint state after each jump of any player in the run
        states = np.empty((who.size + 1, n), dtype=np.int64)
        states[0] = batch.initial_states[r]
        for e in range(who.size):
            states[e + 1] = states[e]
            states[e + 1, who[e]] = new[e]
        durations = np.diff(np.r_[0.0, when, batch.grid.horizon])
        if weights is not None:
            pooled = np.einsum("ij,ejy->eiy", weights, eye[states])
            values = np.take_along_axis(pooled @ f_matrix.T, states[..., None], axis=-1)[..., 0]
        else:
            table = spec.player_values(positions, states, d, atlas)
            values = np.take_along_axis(table, states[..., None], axis=-1)[..., 0]
        out[r] = durations @ values
    return out


def estimate_costs(
    batch: TrajectoryBatch,
    feedback: PlayerFeedback,
    cost: CostModel,
    F_spec: InteractionSpec,
    G_spec: InteractionSpec,
    atlas: PositionAtlas,
) -> CostEstimate:
    """Realised J_i^N for every run: exact integrals of L and F_N along the paths plus G_N at T."""
    d = feedback.d
    per_slab, cumulative = _running_cost_table(cost, feedback, batch.grid)
    running = _integrated_running(batch, per_slab, cumulative)
    interaction = _integrated_interaction(batch, F_spec, feedback.positions, atlas, d)
    final = batch.states_at(batch.grid.horizon)
    g_table = G_spec.player_values(feedback.positions, final, d, atlas)
    terminal = np.take_along_axis(g_table, final[..., None], axis=-1)[..., 0]
    return CostEstimate(running, interaction, terminal)


# ---------- best response ----------
@dataclass(frozen=True)
class OpponentTables:
    F: np.ndarray
    G: np.ndarray
    exact: bool


def opponent_tables(
    feedback: PlayerFeedback,
    laws: np.ndarray,
    F_spec: InteractionSpec,
    G_spec: InteractionSpec,
    atlas: PositionAtlas,
    grid: TimeGrid,
    mode: BestResponseMode = "exact",
    batch: Optional[TrajectoryBatch] = None,
) -> OpponentTables:
    """
    The cost a deviating player faces, F_table (n_steps + 1, N, d) and G_table (N, d).

    Exact mode uses independence of the opponents: for interactions linear in
    m the expected F_N equals F_N against the mixed flow of the opponents'
    laws. Heuristic mode averages F_N over simulated runs at every grid time.
    """
    d = feedback.d
    if mode == "exact":
        for spec in (F_spec, G_spec):
            if not spec.linear:
                raise NonlinearInteractionError(
                    f"{type(spec).__name__} is nonlinear in m; use the heuristic best-response mode"
                )
        q = propagate(feedback.rates, laws, grid)
        return OpponentTables(
            F_spec.mixed_values(feedback.positions, q, atlas),
            G_spec.mixed_values(feedback.positions, q[-1], atlas),
            True,
        )
    if batch is None:
        raise ConfigError("heuristic best response needs a simulated batch")
    f_rows = [
        F_spec.player_values(feedback.positions, batch.states_at(t), d, atlas).mean(axis=0) for t in grid.times
    ]
    g_table = G_spec.player_values(feedback.positions, batch.states_at(grid.horizon), d, atlas).mean(axis=0)
    return OpponentTables(np.stack(f_rows), g_table, False)


def best_response_values(cost: CostModel, tables: OpponentTables, laws: np.ndarray, positions: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """D_i = sum_x m0_i(x) V_i(0, x) for every player at once."""
    values = integrate_hjb(cost, tables.F, tables.G, grid, positions)
    return np.einsum("ix,ix->i", laws, values[0])


def best_response_value(
    i: int,
    equilibrium: EquilibriumResult,
    model: MfgModel,
    layout: PlayerLayout,
    F_spec: Optional[InteractionSpec] = None,
    G_spec: Optional[InteractionSpec] = None,
    mode: BestResponseMode = "exact",
    batch: Optional[TrajectoryBatch] = None,
) -> float:
    """Optimal expected cost of player i (0-based) when every other player keeps the equilibrium feedback."""
    if not 0 <= i < layout.n_players:
        raise ConfigError(f"player index {i} out of range for N={layout.n_players}")
    feedback = build_player_feedback(equilibrium.policy, layout, model.atlas)
    laws = default_initial_laws(model.m0, feedback)
    tables = opponent_tables(
        feedback, laws, F_spec or model.F, G_spec or model.G, model.atlas, model.grid, mode, batch
    )
    return float(best_response_values(model.cost, tables, laws, feedback.positions, model.grid)[i])


def expected_costs(cost: CostModel, feedback: PlayerFeedback, tables: OpponentTables, laws: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Exact J_i of the equilibrium feedback against the same opponent tables."""
    values = evaluate_policy(cost, feedback.rates, tables.F, tables.G, grid, feedback.positions)
    return np.einsum("ix,ix->i", laws, values[0])


# ---------- Nash gap ----------
@dataclass
class NashGapReport:
    positions: np.ndarray
    costs: np.ndarray
    standard_errors: Optional[np.ndarray]
    deviation_values: np.ndarray
    gaps: np.ndarray
    epsilon_hat: float
    quantile: float
    quantile_gap: float
    delta: Dict[float, float]
    cost_estimator: str
    best_response_mode: str
    n_runs: int
    monte_carlo_costs: Optional[np.ndarray] = None
    exact_costs: Optional[np.ndarray] = None
    notes: List[str] = field(default_factory=list)

    @property
    def n_players(self) -> int:
        return int(self.positions.size)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_players": self.n_players,
            "n_runs": self.n_runs,
            "cost_estimator": self.cost_estimator,
            "best_response_mode": self.best_response_mode,
            "deviation_class": DEVIATION_CLASS,
            "epsilon_hat": self.epsilon_hat,
            "quantile": self.quantile,
            "quantile_gap": self.quantile_gap,
            "delta": [{"epsilon": eps, "delta": value} for eps, value in self.delta.items()],
            "max_standard_error": None if self.standard_errors is None else float(self.standard_errors.max()),
            "notes": list(self.notes),
        }

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                "player": np.arange(1, self.n_players + 1),
                "position": self.positions,
                "cost": self.costs,
                "standard_error": self.standard_errors if self.standard_errors is not None else np.nan,
                "deviation_value": self.deviation_values,
                "gap": self.gaps,
            }
        )
        if self.exact_costs is not None:
            frame["exact_cost"] = self.exact_costs
        return frame


def summarize_gaps(gaps: np.ndarray, epsilon_grid: Sequence[float], quantile: float = 0.9) -> Tuple[float, float, Dict[float, float]]:
    """epsilon_hat = max gap, the quantile gap, and delta(eps) = share of players with gap > eps."""
    gaps = np.maximum(np.asarray(gaps, dtype=float), 0.0)
    delta = {float(eps): float(np.mean(gaps > eps)) for eps in epsilon_grid}
    return float(gaps.max()), float(np.quantile(gaps, quantile)), delta


def nash_gap_report(
    equilibrium: EquilibriumResult,
    model: MfgModel,
    config: SimConfig,
    epsilon_grid: Sequence[float],
    F_player: Optional[InteractionSpec] = None,
    G_player: Optional[InteractionSpec] = None,
    cost_estimator: CostEstimator = "monte_carlo",
    best_response: BestResponseMode = "exact",
    quantile: float = 0.9,
    batch: Optional[TrajectoryBatch] = None,
) -> NashGapReport:
    """
    Per-player Nash gaps max(0, J_i - D_i) of the equilibrium feedback in the N-player game.

    F_player / G_player default to the limit-game F and G (F_N = F, G_N = G).
    """
    if cost_estimator not in ("monte_carlo", "policy_evaluation"):
        raise ConfigError(f"unknown cost estimator: {cost_estimator}")
    F_spec = F_player or model.F
    G_spec = G_player or model.G
    feedback = build_player_feedback(equilibrium.policy, config.layout, model.atlas)
    laws = config.initial_laws if config.initial_laws is not None else default_initial_laws(model.m0, feedback)
    laws = np.asarray(laws, dtype=float)
    notes: List[str] = []

    needs_runs = cost_estimator == "monte_carlo" or best_response == "heuristic"
    if needs_runs and batch is None:
        batch = simulate(config, feedback, model.grid, model.m0)
    mc: Optional[CostEstimate] = None
    if batch is not None:
        mc = estimate_costs(batch, feedback, model.cost, F_spec, G_spec, model.atlas)

    tables = opponent_tables(feedback, laws, F_spec, G_spec, model.atlas, model.grid, best_response, batch)
    if not tables.exact:
        notes.append("deviation values use plug-in averages of F_N over simulated runs (heuristic)")
    deviation = best_response_values(model.cost, tables, laws, feedback.positions, model.grid)

    exact_costs: Optional[np.ndarray] = None
    if cost_estimator == "policy_evaluation" or tables.exact:
        exact_costs = expected_costs(model.cost, feedback, tables, laws, model.grid)

    if cost_estimator == "policy_evaluation":
        costs = exact_costs
    else:
        costs = mc.mean
    gaps = np.maximum(costs - deviation, 0.0)
    eps_hat, q_gap, delta = summarize_gaps(gaps, epsilon_grid, quantile)
    logger.info("N=%d: epsilon_hat=%.3e, %.0f%% quantile gap=%.3e", config.layout.n_players, eps_hat, 100 * quantile, q_gap)
    return NashGapReport(
        positions=np.asarray(config.layout.positions),
        costs=costs,
        standard_errors=None if mc is None else mc.standard_error,
        deviation_values=deviation,
        gaps=gaps,
        epsilon_hat=eps_hat,
        quantile=quantile,
        quantile_gap=q_gap,
        delta=delta,
        cost_estimator=cost_estimator,
        best_response_mode=best_response,
        n_runs=0 if batch is None else batch.n_runs,
        monte_carlo_costs=None if mc is None else mc.mean,
        exact_costs=exact_costs,
        notes=notes,
    )


# ---------- empirical measures ----------
def measure_discrepancy(
    batch: TrajectoryBatch,
    layout: PlayerLayout,
    flow: MeasureFlow,
    atlas: PositionAtlas,
    test_fn: TestFunction,
    t: float,
) -> float:
    """
    Run- and player-averaged |int phi dm^{N,i}_X(t) - int phi dm(t)| for a
    bounded test function phi(x, u), with x 0-based.
    """
    n = layout.n_players
    if n < 2:
        raise ConfigError("measure discrepancy needs N >= 2")
    states = batch.states_at(t)
    phi = np.asarray(test_fn(states, np.broadcast_to(layout.positions, states.shape)), dtype=float)
    empirical = (phi.sum(axis=1, keepdims=True) - phi) / (n - 1)
    k = int(np.clip(np.rint(t / batch.grid.dt), 0, batch.grid.n_steps))
    d = flow.d
    cell_phi = np.stack(
        [np.asarray(test_fn(np.full(atlas.size, x), atlas.cells), dtype=float) for x in range(d)], axis=-1
    )
    limit = float(np.einsum("kx,kx,k->", cell_phi, flow.values[k], atlas.weights))
    return float(np.mean(np.abs(empirical - limit)))
