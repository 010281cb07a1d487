import numpy as np
import pytest
from scipy.linalg import expm

from services.costs_service import ConstantTheta, Potential, QuadraticCost
from services.interactions_service import LocalInteraction, TwoBodyInteraction, ZeroInteraction, make_kernel
from services.solver_service import (
    MfgModel,
    SolverConfig,
    check_monotonicity,
    evaluate_policy,
    picard_map,
    policy_from_value,
    propagate,
    solve_hjb_backward,
    solve_kolmogorov_forward,
    solve_mfg,
)
from utils.errors import ConfigError, GridMismatchError, SimplexViolationError
from utils.fields import MeasureFlow, Policy, flow_distance
from utils.grids import PositionAtlas, TimeGrid, uniform_atlas

ONE_CELL = PositionAtlas(cells=[0.5], weights=[1.0])


def _terminal_on_state_two() -> TwoBodyInteraction:
    # G(x, m) = sum_y f(x, y) m_y with f = [[0, 0], [1, 1]] is (0, 1) for every m
    return TwoBodyInteraction(make_kernel("constant"), np.array([[0.0, 0.0], [1.0, 1.0]]))


def _riccati_model(n_steps: int = 100) -> MfgModel:
    return MfgModel(
        cost=QuadraticCost(2, ConstantTheta(1.0)),
        F=ZeroInteraction(),
        G=_terminal_on_state_two(),
        m0=np.array([0.5, 0.5]),
        grid=TimeGrid(1.0, n_steps),
        atlas=ONE_CELL,
    )


def _monotone_model(n_cells: int = 1) -> MfgModel:
    return MfgModel(
        cost=QuadraticCost(2, ConstantTheta(1.0), Potential((0.0, 1.0))),
        F=LocalInteraction(np.eye(2)),
        G=ZeroInteraction(),
        m0=np.array([0.5, 0.5]),
        grid=TimeGrid(1.0, 100),
        atlas=uniform_atlas(n_cells),
    )


def test_hjb_matches_riccati_solution():
    model = _riccati_model()
    flow = MeasureFlow.frozen_at(model.m0, model.grid.n_steps)
    value = solve_hjb_backward(model.cost, model.F, model.G, flow, model.grid, model.atlas)
    s = model.grid.horizon - model.grid.times
    np.testing.assert_allclose(value.values[:, 0, 1], 1.0 / (1.0 + s / 2.0), atol=1e-8)
    np.testing.assert_allclose(value.values[:, 0, 0], 0.0, atol=1e-12)


def test_implicit_euler_hjb_is_first_order_close():
    model = _riccati_model()
    flow = MeasureFlow.frozen_at(model.m0, model.grid.n_steps)
    value = solve_hjb_backward(model.cost, model.F, model.G, flow, model.grid, model.atlas, "implicit_euler")
    assert value.values[0, 0, 1] == pytest.approx(2.0 / 3.0, abs=1e-2)


def test_hjb_rejects_mismatched_flow():
    model = _riccati_model()
    flow = MeasureFlow.frozen_at(model.m0, 10)
    with pytest.raises(GridMismatchError):
        solve_hjb_backward(model.cost, model.F, model.G, flow, model.grid, model.atlas)


def test_forward_two_state_closed_form():
    grid = TimeGrid(1.0, 100)
    rates = np.broadcast_to(np.array([[0.0, 1.0], [1.0, 0.0]]), (101, 1, 2, 2))
    flow = solve_kolmogorov_forward(Policy(rates, 10.0), np.array([[1.0, 0.0]]), grid)
    np.testing.assert_allclose(flow.values[:, 0, 0], 0.5 * (1.0 + np.exp(-2.0 * grid.times)), atol=1e-8)


def test_forward_matches_matrix_exponential():
    rng = np.random.default_rng(2)
    q_rates = rng.uniform(0.0, 2.0, size=(3, 3))
    np.fill_diagonal(q_rates, 0.0)
    q = q_rates - np.diag(q_rates.sum(axis=1))
    grid = TimeGrid(2.0, 200)
    m0 = np.array([0.2, 0.5, 0.3])
    out = propagate(np.broadcast_to(q_rates, (201, 3, 3)), m0, grid)
    for k in (50, 200):
        np.testing.assert_allclose(out[k], m0 @ expm(q * grid.times[k]), atol=1e-6)


def test_forward_simplex_violation_and_implicit_fallback():
    grid = TimeGrid(1.0, 10)
    rates = np.broadcast_to(np.array([[0.0, 100.0], [100.0, 0.0]]), (11, 1, 2, 2))
    policy = Policy(rates, 1e3)
    with pytest.raises(SimplexViolationError):
        solve_kolmogorov_forward(policy, np.array([[1.0, 0.0]]), grid, "rk4")
    flow = solve_kolmogorov_forward(policy, np.array([[1.0, 0.0]]), grid, "implicit_euler")
    assert flow.values.min() >= 0.0
    np.testing.assert_allclose(flow.values[-1, 0], [0.5, 0.5], atol=1e-3)


def test_evaluate_policy_constant_rate_closed_form():
    alpha, horizon = 0.8, 1.0
    cost = QuadraticCost(2, ConstantTheta(1.0), Potential((0.0, 1.0)))
    grid = TimeGrid(horizon, 200)
    rates = np.broadcast_to(np.array([[0.0, 0.0], [alpha, 0.0]]), (201, 1, 2, 2))
    j = evaluate_policy(cost, rates, np.zeros((201, 1, 2)), np.zeros((1, 2)), grid, np.array([0.5]))
    expected = (1.0 + alpha**2 / 2.0) * (1.0 - np.exp(-alpha * horizon)) / alpha
    assert j[0, 0, 1] == pytest.approx(expected, abs=1e-9)
    assert j[0, 0, 0] == pytest.approx(0.0, abs=1e-12)


def test_decoupled_game_converges_in_one_iteration():
    model = MfgModel(
        cost=QuadraticCost(2, ConstantTheta(1.0), Potential((0.0, 1.0))),
        F=ZeroInteraction(),
        G=ZeroInteraction(),
        m0=np.array([0.5, 0.5]),
        grid=TimeGrid(1.0, 50),
        atlas=ONE_CELL,
    )
    result = solve_mfg(model, SolverConfig(damping=0.1))
    assert result.converged
    assert result.iterations == 1
    assert result.residual_history == [0.0]


def test_monotone_instance_converges_to_a_fixed_point():
    model = _monotone_model()
    config = SolverConfig(tolerance=1e-8)
    result = solve_mfg(model, config)
    assert result.converged
    assert result.residual <= 1e-8
    assert flow_distance(picard_map(model, result.flow, config), result.flow, model.atlas) == pytest.approx(result.residual)
    # optimal feedback pushes mass out of the costly state
    assert result.flow.values[-1, 0, 0] > 0.5
    np.testing.assert_allclose(result.policy.rates[:, 0, 0, 1], 0.0, atol=1e-12)


def test_random_initial_guess_reaches_the_same_equilibrium():
    model = _monotone_model(n_cells=3)
    frozen = solve_mfg(model, SolverConfig(tolerance=1e-9))
    random = solve_mfg(model, SolverConfig(tolerance=1e-9, initial_guess="random", seed=5))
    assert frozen.converged and random.converged
    assert flow_distance(frozen.flow, random.flow, model.atlas) < 1e-7


def test_fictitious_play_approaches_the_picard_solution():
    model = _monotone_model()
    picard = solve_mfg(model, SolverConfig(tolerance=1e-10))
    fictitious = solve_mfg(model, SolverConfig(mode="fictitious_play", max_iterations=100, tolerance=1e-10))
    assert flow_distance(picard.flow, fictitious.flow, model.atlas) < 0.05


def test_iteration_cap_reports_non_convergence():
    result = solve_mfg(_monotone_model(), SolverConfig(max_iterations=1, tolerance=1e-12))
    assert not result.converged
    assert result.iterations == 1
    assert len(result.residual_history) == 1


def test_rate_cap_warning():
    result = solve_mfg(_riccati_model(), SolverConfig(rate_cap=0.1))
    assert "rate_cap_hit" in result.warnings
    assert result.policy.rates.max() <= 0.1


def test_policy_from_value_uses_minimizer():
    model = _riccati_model()
    flow = MeasureFlow.frozen_at(model.m0, model.grid.n_steps)
    value = solve_hjb_backward(model.cost, model.F, model.G, flow, model.grid, model.atlas)
    policy = policy_from_value(model.cost, value, model.atlas)
    np.testing.assert_allclose(policy.rates[:, 0, 1, 0], value.values[:, 0, 1], atol=1e-12)


def test_monotonicity_checks():
    atlas = uniform_atlas(3)
    good = check_monotonicity(LocalInteraction(np.eye(2)), atlas, 200, seed=0)
    assert good.monotone and good.min_value >= 0
    bad = check_monotonicity(LocalInteraction(-np.eye(2)), atlas, 200, seed=0)
    assert not bad.monotone
    assert bad.to_dict()["witness"]["value"] < 0
    zero = check_monotonicity(ZeroInteraction(), atlas, 50, seed=0)
    assert zero.min_value == 0.0
    average = check_monotonicity(TwoBodyInteraction(make_kernel("constant"), np.eye(2)), atlas, 200, seed=1)
    assert average.monotone


def test_model_and_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig(damping=0.0)
    with pytest.raises(ConfigError):
        SolverConfig(integrator="euler")
    with pytest.raises(ConfigError):
        MfgModel(QuadraticCost(2), ZeroInteraction(), ZeroInteraction(), np.array([0.7, 0.7]), TimeGrid(1.0, 10), ONE_CELL)
    with pytest.raises(ConfigError):
        MfgModel(QuadraticCost(2), LocalInteraction(np.eye(3)), ZeroInteraction(), np.array([0.5, 0.5]), TimeGrid(1.0, 10), ONE_CELL)


@pytest.mark.parametrize("d", [2, 3, 5])
@pytest.mark.parametrize("n_cells", [1, 4, 16])
@pytest.mark.parametrize("n_steps", [50, 200])
def test_forward_solve_conserves_mass(d, n_cells, n_steps):
    rng = np.random.default_rng(d * 100 + n_cells * 10 + n_steps)
    grid = TimeGrid(1.0, n_steps)
    rates = rng.uniform(0.0, 3.0, size=(n_steps + 1, n_cells, d, d))
    rates[..., np.arange(d), np.arange(d)] = 0.0
    m0 = rng.dirichlet(np.ones(d), size=n_cells)
    flow = solve_kolmogorov_forward(Policy(rates, 10.0), m0, grid)
    np.testing.assert_allclose(flow.values.sum(axis=-1), 1.0, atol=1e-8)


def test_hjb_error_contracts_with_the_step():
    errors = []
    for n_steps in (10, 20):
        model = _riccati_model(n_steps)
        flow = MeasureFlow.frozen_at(model.m0, n_steps)
        value = solve_hjb_backward(model.cost, model.F, model.G, flow, model.grid, model.atlas)
        errors.append(abs(value.values[0, 0, 1] - 2.0 / 3.0))
    assert errors[0] < 1e-4
    assert errors[0] >= 8 * errors[1]


def _slab_dp(potential: np.ndarray, terminal: np.ndarray, horizon: float, n_slabs: int, rate_grid: np.ndarray) -> np.ndarray:
    """Two-state value over controls that are constant on each of n_slabs time slabs, one rate per state."""
    h = horizon / n_slabs
    up, down = (a.ravel() for a in np.meshgrid(rate_grid, rate_grid, indexing="ij"))
    blocks = np.zeros((up.size, 4, 4))
    blocks[:, 0, 0], blocks[:, 0, 1] = -up * h, up * h
    blocks[:, 1, 0], blocks[:, 1, 1] = down * h, -down * h
    blocks[:, 0, 2] = blocks[:, 1, 3] = h
    # upper-left block: transition matrix; upper-right block: expected time spent in each state
    exp = expm(blocks)
    running = potential[None, :] + 0.5 * np.column_stack([up**2, down**2])
    occupation = np.einsum("cxy,cy->cx", exp[:, :2, 2:], running)
    value = np.asarray(terminal, dtype=float)
    for _ in range(n_slabs):
        value = (occupation + exp[:, :2, :2] @ value).min(axis=0)
    return value


def test_hjb_matches_discrete_control_dynamic_programming():
    potential = np.array([0.0, 1.0])
    model = MfgModel(
        cost=QuadraticCost(2, ConstantTheta(1.0), Potential(tuple(potential))),
        F=ZeroInteraction(),
        G=_terminal_on_state_two(),
        m0=np.array([0.5, 0.5]),
        grid=TimeGrid(1.0, 3),
        atlas=ONE_CELL,
    )
    flow = MeasureFlow.frozen_at(model.m0, model.grid.n_steps)
    value = solve_hjb_backward(model.cost, model.F, model.G, flow, model.grid, model.atlas)
    rate_grid = np.round(np.arange(81) * 0.05, 2)
    oracle = _slab_dp(potential, np.array([0.0, 1.0]), 1.0, 3, rate_grid)
    np.testing.assert_allclose(value.values[0, 0], oracle, atol=2e-2)


def test_picard_map_is_continuous_in_the_flow():
    model = MfgModel(
        cost=QuadraticCost(2, ConstantTheta(1.0), Potential((0.0, 1.0))),
        F=TwoBodyInteraction(make_kernel("gaussian", bandwidth=0.3), np.eye(2)),
        G=ZeroInteraction(),
        m0=np.array([0.5, 0.5]),
        grid=TimeGrid(1.0, 50),
        atlas=uniform_atlas(4),
    )
    base = MeasureFlow.frozen_at(model.m0, model.grid.n_steps)
    other = MeasureFlow.frozen_at(np.tile([0.9, 0.1], (4, 1)), model.grid.n_steps)
    image = picard_map(model, base)
    shifts = {}
    for eta in (1e-2, 1e-3, 1e-4):
        nearby = MeasureFlow((1 - eta) * base.values + eta * other.values)
        moved = flow_distance(picard_map(model, nearby), image, model.atlas)
        assert moved <= 5 * flow_distance(nearby, base, model.atlas)
        shifts[eta] = moved
    assert shifts[1e-4] < shifts[1e-3] < shifts[1e-2]


def test_equilibrium_flow_is_lipschitz_in_time():
    model = _monotone_model(n_cells=3)
    result = solve_mfg(model, SolverConfig(tolerance=1e-9))
    peak = result.policy.rates.max()
    assert peak > 0
    steps = np.einsum("tkx,k->t", np.abs(np.diff(result.flow.values, axis=0)), model.atlas.weights)
    assert np.all(steps <= peak * model.d * model.grid.dt * (1 + 1e-9))


def test_forward_solve_commutes_with_relabeling_states():
    rng = np.random.default_rng(12)
    grid = TimeGrid(1.0, 40)
    rates = rng.uniform(0.0, 2.0, size=(41, 2, 3, 3))
    rates[..., np.arange(3), np.arange(3)] = 0.0
    m0 = rng.dirichlet(np.ones(3), size=2)
    perm = np.array([2, 0, 1])
    flow = solve_kolmogorov_forward(Policy(rates, 10.0), m0, grid)
    relabeled = solve_kolmogorov_forward(Policy(rates[..., perm, :][..., perm], 10.0), m0[:, perm], grid)
    np.testing.assert_allclose(relabeled.values, flow.values[..., perm], atol=1e-12)
