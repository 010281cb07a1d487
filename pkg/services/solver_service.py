from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np

from config import (
    DEFAULT_DAMPING,
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_RATE_CAP,
    DEFAULT_TOLERANCE,
    MONOTONE_TOLERANCE,
    SIMPLEX_TOLERANCE,
)
from services.costs_service import CostModel
from services.interactions_service import InteractionSpec, is_zero
from utils import streams
from utils.errors import ConfigError, GridMismatchError, IntegrationError, SimplexViolationError
from utils.fields import MeasureFlow, Policy, ValueField, flow_distance, generator, gradient
from utils.grids import PositionAtlas, StateSpace, TimeGrid

logger = logging.getLogger(__name__)

Integrator = Literal["rk4", "implicit_euler"]

POLICY_ITERATION_MAX = 50
POLICY_ITERATION_TOL = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    damping: float = DEFAULT_DAMPING
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    integrator: Integrator = "rk4"
    mode: Literal["picard", "fictitious_play"] = "picard"
    initial_guess: Literal["frozen", "random"] = "frozen"
    initial_flow: Optional[MeasureFlow] = None
    seed: int = 0
    rate_cap: float = DEFAULT_RATE_CAP

    def __post_init__(self) -> None:
        if not 0 < self.damping <= 1:
            raise ConfigError(f"damping must lie in (0, 1], got {self.damping}")
        if not self.tolerance > 0:
            raise ConfigError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.integrator not in ("rk4", "implicit_euler"):
            raise ConfigError(f"unknown integrator: {self.integrator}")
        if self.mode not in ("picard", "fictitious_play"):
            raise ConfigError(f"unknown iteration mode: {self.mode}")
        if not self.rate_cap > 0:
            raise ConfigError("rate_cap must be positive")


@dataclass(frozen=True)
class MfgModel:
    """Everything that defines one long-range game on a discretisation."""

    cost: CostModel
    F: InteractionSpec
    G: InteractionSpec
    m0: np.ndarray
    grid: TimeGrid
    atlas: PositionAtlas

    def __post_init__(self) -> None:
        m0 = np.array(self.m0, dtype=float)
        if m0.ndim == 1:
            m0 = np.broadcast_to(m0, (self.atlas.size, m0.size)).copy()
        if m0.shape != (self.atlas.size, self.cost.d):
            raise ConfigError(f"m0 must be ({self.atlas.size}, {self.cost.d}), got {m0.shape}")
        if np.any(m0 < 0) or np.abs(m0.sum(axis=1) - 1.0).max() > 1e-12:
            raise ConfigError("m0 must be a probability vector in every cell")
        m0.setflags(write=False)
        object.__setattr__(self, "m0", m0)
        self.F.validate(self.atlas, self.cost.d)
        self.G.validate(self.atlas, self.cost.d)

    @property
    def states(self) -> StateSpace:
        return StateSpace(self.cost.d)

    @property
    def d(self) -> int:
        return self.cost.d

    @property
    def is_decoupled(self) -> bool:
        return is_zero(self.F) and is_zero(self.G)


@dataclass
class EquilibriumResult:
    value: ValueField
    flow: MeasureFlow
    policy: Policy
    residual_history: List[float]
    converged: bool
    iterations: int
    warnings: List[str] = field(default_factory=list)

    @property
    def residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else float("nan")

    def summary(self) -> Dict[str, Any]:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "final_residual": self.residual,
            "residual_history": list(self.residual_history),
            "warnings": list(self.warnings),
        }


# ---------- backward HJB ----------
def _check_finite(values: np.ndarray, k: int, what: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        cell = int(np.argwhere(bad)[0][0])
        raise IntegrationError(f"{what} produced non-finite values", k, cell)


def integrate_hjb(
    cost: CostModel,
    F_table: np.ndarray,
    G_table: np.ndarray,
    grid: TimeGrid,
    positions: np.ndarray,
    integrator: Integrator = "rk4",
) -> np.ndarray:
    """
    Integrate dV/dt = H(x, grad V, u) - F backward from V(T) = G, one position per row.

    F_table is (n_steps + 1, P, d) at the grid times, G_table is (P, d).
    RK4 evaluates F at t_{k+1}, the slab midpoint (average of both ends) and t_k.
    """
    F_table = np.asarray(F_table, dtype=float)
    positions = np.asarray(positions, dtype=float)
    dt = grid.dt
    out = np.empty_like(F_table)
    out[-1] = G_table
    _check_finite(out[-1], grid.n_steps, "terminal cost")

    def rhs(v: np.ndarray, f: np.ndarray) -> np.ndarray:
        # derivative in backward time s = T - t
        return f - cost.hamiltonian_field(gradient(v), positions)

    for k in range(grid.n_steps - 1, -1, -1):
        v = out[k + 1]
        if integrator == "rk4":
            f_hi, f_lo = F_table[k + 1], F_table[k]
            f_mid = 0.5 * (f_hi + f_lo)
            k1 = rhs(v, f_hi)
            k2 = rhs(v + 0.5 * dt * k1, f_mid)
            k3 = rhs(v + 0.5 * dt * k2, f_mid)
            k4 = rhs(v + dt * k3, f_lo)
            out[k] = v + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            out[k] = _implicit_hjb_step(cost, v, F_table[k], dt, positions)
        _check_finite(out[k], k, "HJB integration")
    return out


def _implicit_hjb_step(cost: CostModel, v_next: np.ndarray, f: np.ndarray, dt: float, positions: np.ndarray) -> np.ndarray:
    """Solve (I - dt Q_a) V = V_{k+1} + dt (F + L(a)) with a = a*(grad V) by policy iteration."""
    d = v_next.shape[-1]
    eye = np.eye(d)
    rates = cost.minimizer_field(gradient(v_next), positions)
    v = v_next
    for _ in range(POLICY_ITERATION_MAX):
        lhs = eye - dt * generator(rates)
        rhs = v_next + dt * (f + cost.running_cost_field(rates, positions))
        v = np.linalg.solve(lhs, rhs[..., None])[..., 0]
        new_rates = cost.minimizer_field(gradient(v), positions)
        if np.max(np.abs(new_rates - rates)) <= POLICY_ITERATION_TOL:
            break
        rates = new_rates
    return v


def _check_flow_grid(flow: MeasureFlow, grid: TimeGrid, atlas: PositionAtlas) -> None:
    if flow.n_times != grid.n_steps + 1 or flow.n_cells != atlas.size:
        raise GridMismatchError(
            f"flow has {flow.n_times} times x {flow.n_cells} cells, grid expects "
            f"{grid.n_steps + 1} x {atlas.size}"
        )


def solve_hjb_backward(
    cost: CostModel,
    F_spec: InteractionSpec,
    G_spec: InteractionSpec,
    flow: MeasureFlow,
    grid: TimeGrid,
    atlas: PositionAtlas,
    integrator: Integrator = "rk4",
) -> ValueField:
    """Value function of the representative player at every atlas cell against a fixed flow."""
    _check_flow_grid(flow, grid, atlas)
    F_table = F_spec.cell_field(flow.values, atlas)
    G_table = G_spec.cell_field(flow.values[-1], atlas)
    return ValueField(integrate_hjb(cost, F_table, G_table, grid, atlas.cells, integrator))


# ---------- optimal feedback ----------
def _optimal_rates(cost: CostModel, values: np.ndarray, positions: np.ndarray, rate_cap: float) -> Tuple[np.ndarray, bool]:
    rates = cost.minimizer_field(gradient(values), positions)
    hit = bool(np.any(rates > rate_cap))
    if hit:
        logger.warning("optimal rates exceed the cap %.3g (max %.3g); clipping", rate_cap, float(rates.max()))
        rates = np.minimum(rates, rate_cap)
    return rates, hit


def policy_from_value(
    cost: CostModel,
    value: ValueField,
    atlas: PositionAtlas,
    rate_cap: float = DEFAULT_RATE_CAP,
) -> Policy:
    rates, _ = _optimal_rates(cost, value.values, atlas.cells, rate_cap)
    return Policy(rates, rate_cap)


# ---------- forward Kolmogorov ----------
def _project_simplex(m: np.ndarray, k: int) -> np.ndarray:
    low = m.min(axis=-1)
    drift = np.abs(m.sum(axis=-1) - 1.0)
    violation = np.maximum(-low, drift)
    if violation.max() > SIMPLEX_TOLERANCE:
        cell = int(np.argmax(violation))
        raise SimplexViolationError(k, cell, float(violation.max()))
    m = np.clip(m, 0.0, None)
    return m / m.sum(axis=-1, keepdims=True)


def propagate(rates: np.ndarray, m0: np.ndarray, grid: TimeGrid, integrator: Integrator = "rk4") -> np.ndarray:
    """Forward equation dm/dt = m Q(t) with Q frozen at the left end of each slab, rows independent."""
    rates = np.asarray(rates, dtype=float)
    m = np.array(m0, dtype=float)
    out = np.empty((grid.n_steps + 1, *m.shape))
    out[0] = m
    dt = grid.dt
    d = m.shape[-1]
    for k in range(grid.n_steps):
        q = generator(rates[k])
        if integrator == "rk4":
            def rhs(x: np.ndarray) -> np.ndarray:
                return np.einsum("...x,...xy->...y", x, q)

            k1 = rhs(m)
            k2 = rhs(m + 0.5 * dt * k1)
            k3 = rhs(m + 0.5 * dt * k2)
            k4 = rhs(m + dt * k3)
            m = m + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            lhs = np.swapaxes(np.eye(d) - dt * q, -1, -2)
            m = np.linalg.solve(lhs, m[..., None])[..., 0]
        out[k + 1] = _project_simplex(m, k + 1)
        m = out[k + 1]
    return out


def solve_kolmogorov_forward(
    policy: Policy,
    m0: np.ndarray,
    grid: TimeGrid,
    integrator: Integrator = "rk4",
) -> MeasureFlow:
    m0 = np.asarray(m0, dtype=float)
    if policy.rates.shape[0] != grid.n_steps + 1 or policy.rates.shape[1] != m0.shape[0]:
        raise GridMismatchError(f"policy shape {policy.rates.shape} does not match m0 {m0.shape} on {grid}")
    return MeasureFlow(propagate(policy.rates, m0, grid, integrator))


# ---------- fixed point ----------
@dataclass(frozen=True)
class BestResponse:
    value: ValueField
    policy: Policy
    image: MeasureFlow
    rate_cap_hit: bool


def best_response(model: MfgModel, flow: MeasureFlow, config: SolverConfig) -> BestResponse:
    value = solve_hjb_backward(model.cost, model.F, model.G, flow, model.grid, model.atlas, config.integrator)
    rates, hit = _optimal_rates(model.cost, value.values, model.atlas.cells, config.rate_cap)
    policy = Policy(rates, config.rate_cap)
    image = solve_kolmogorov_forward(policy, model.m0, model.grid, config.integrator)
    return BestResponse(value, policy, image, hit)


def picard_map(model: MfgModel, flow: MeasureFlow, config: Optional[SolverConfig] = None) -> MeasureFlow:
    """Phi(m): flow induced by the optimal feedback against m."""
    return best_response(model, flow, config or SolverConfig()).image


def initial_flow(model: MfgModel, config: SolverConfig) -> MeasureFlow:
    if config.initial_flow is not None:
        _check_flow_grid(config.initial_flow, model.grid, model.atlas)
        return config.initial_flow
    if config.initial_guess == "random":
        rng = streams.stream(config.seed, streams.INITIAL_FLOW)
        values = rng.dirichlet(np.ones(model.d), size=(model.grid.n_steps + 1, model.atlas.size))
        values[0] = model.m0
        return MeasureFlow(values)
    return MeasureFlow.frozen_at(model.m0, model.grid.n_steps)


def solve_mfg(model: MfgModel, config: Optional[SolverConfig] = None) -> EquilibriumResult:
    """
    Damped fixed-point iteration m <- (1 - lam) m + lam Phi(m).

    Stops when flow_distance(m, Phi(m)) <= tolerance. The returned value and
    policy are the best response to the returned flow. Non-convergence is
    reported through `converged`, never raised.
    """
    config = config or SolverConfig()
    flow = initial_flow(model, config)
    warnings: List[str] = []
    if model.is_decoupled:
        # Phi is constant in m, so one undamped step lands on the fixed point
        flow = picard_map(model, flow, config)

    history: List[float] = []
    converged = False
    iterations = 0
    step = best_response(model, flow, config)
    for iterations in range(1, config.max_iterations + 1):
        if step.rate_cap_hit and "rate_cap_hit" not in warnings:
            warnings.append("rate_cap_hit")
        residual = flow_distance(flow, step.image, model.atlas)
        history.append(residual)
        logger.debug("iteration %d residual %.3e", iterations, residual)
        if residual <= config.tolerance:
            converged = True
            break
        if iterations == config.max_iterations:
            break
        lam = 1.0 / (iterations + 1) if config.mode == "fictitious_play" else config.damping
        flow = MeasureFlow((1.0 - lam) * flow.values + lam * step.image.values)
        step = best_response(model, flow, config)

    if converged:
        logger.info("converged after %d iterations (residual %.3e)", iterations, history[-1])
    else:
        logger.warning("stopped after %d iterations without converging (residual %.3e)", iterations, history[-1])
    return EquilibriumResult(
        value=step.value,
        flow=flow,
        policy=step.policy,
        residual_history=history,
        converged=converged,
        iterations=iterations,
        warnings=warnings,
    )


# ---------- fixed-feedback evaluation ----------
def evaluate_policy(
    cost: CostModel,
    rates: np.ndarray,
    F_table: np.ndarray,
    G_table: np.ndarray,
    grid: TimeGrid,
    positions: np.ndarray,
    integrator: Integrator = "rk4",
) -> np.ndarray:
    """
    Expected remaining cost of a fixed feedback, one row per position.

    rates (n_steps + 1, P, d, d) are applied piecewise-constant (rates[k] on
    [t_k, t_{k+1})), exactly as the N-player simulator applies them; the
    result solves dJ/dt = -(Q J + L(a) + F) with J(T) = G.
    """
    rates = np.asarray(rates, dtype=float)
    F_table = np.asarray(F_table, dtype=float)
    positions = np.asarray(positions, dtype=float)
    dt = grid.dt
    d = F_table.shape[-1]
    out = np.empty_like(F_table)
    out[-1] = G_table
    for k in range(grid.n_steps - 1, -1, -1):
        q = generator(rates[k])
        running = cost.running_cost_field(rates[k], positions)
        j = out[k + 1]
        if integrator == "rk4":
            def rhs(v: np.ndarray, f: np.ndarray) -> np.ndarray:
                return np.einsum("...xy,...y->...x", q, v) + running + f

            f_hi, f_lo = F_table[k + 1], F_table[k]
            f_mid = 0.5 * (f_hi + f_lo)
            k1 = rhs(j, f_hi)
            k2 = rhs(j + 0.5 * dt * k1, f_mid)
            k3 = rhs(j + 0.5 * dt * k2, f_mid)
            k4 = rhs(j + dt * k3, f_lo)
            out[k] = j + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            lhs = np.eye(d) - dt * q
            out[k] = np.linalg.solve(lhs, (j + dt * (running + F_table[k]))[..., None])[..., 0]
        _check_finite(out[k], k, "policy evaluation")
    return out


# ---------- monotonicity ----------
@dataclass(frozen=True)
class MonotonicityReport:
    min_value: float
    n_samples: int
    violating_pair: Optional[Tuple[np.ndarray, np.ndarray]] = None
    violating_value: Optional[float] = None

    @property
    def monotone(self) -> bool:
        return self.min_value >= -MONOTONE_TOLERANCE

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "min_value": self.min_value,
            "n_samples": self.n_samples,
            "monotone": self.monotone,
        }
        if self.violating_pair is not None:
            m, m_tilde = self.violating_pair
            payload["witness"] = {"value": self.violating_value, "m": m.tolist(), "m_tilde": m_tilde.tolist()}
        return payload


def check_monotonicity(F_spec: InteractionSpec, atlas: PositionAtlas, n_samples: int, seed: int, d: int = 2) -> MonotonicityReport:
    """
    Sample pairs of per-cell Dirichlet distributions and evaluate
    sum_x int [F(x,m,u) - F(x,m~,u)] (m_x(u) - m~_x(u)) mu(du).
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = streams.stream(seed, streams.MONOTONICITY)
    m = rng.dirichlet(np.ones(d), size=(n_samples, atlas.size))
    m_tilde = rng.dirichlet(np.ones(d), size=(n_samples, atlas.size))
    diff_f = F_spec.cell_field(m, atlas) - F_spec.cell_field(m_tilde, atlas)
    values = np.einsum("skx,skx,k->s", diff_f, m - m_tilde, atlas.weights)
    min_value = float(values.min())
    bad = np.flatnonzero(values < -MONOTONE_TOLERANCE)
    if bad.size:
        first = int(bad[0])
        return MonotonicityReport(min_value, n_samples, (m[first], m_tilde[first]), float(values[first]))
    return MonotonicityReport(min_value, n_samples)
