import numpy as np
import pytest

from services.costs_service import (
    AffineTheta,
    ConstantTheta,
    GenericCost,
    Potential,
    QuadraticCost,
    QuarticCost,
    argmin_rates,
    check_gradient,
    hamiltonian,
)
from utils.errors import ConfigError


def _quadratic_generic(d: int, theta: float) -> GenericCost:
    def lagrangian(x, a, u):
        b = a.copy()
        b[x] = 0.0
        return 0.5 * theta * float(b @ b)

    def grad(x, a, u):
        return theta * a

    return GenericCost(d=d, lagrangian_fn=lagrangian, gradient_fn=grad, gamma_value=theta / 2)


def test_quadratic_argmin_closed_form():
    cost = QuadraticCost(3, ConstantTheta(2.0))
    a = argmin_rates(cost, 0, [0.0, -2.0, 1.0], 0.5)
    np.testing.assert_allclose(a, [0.0, 1.0, 0.0])


def test_quadratic_hamiltonian_value():
    cost = QuadraticCost(3, ConstantTheta(2.0), Potential((0.5, 0.0, 0.0)))
    # H = sum_{p_y < 0} p_y^2 / (2 theta) - c(x) = 4 / 4 - 0.5
    assert hamiltonian(cost, 0, [0.0, -2.0, 1.0], 0.3) == pytest.approx(0.5)


def test_hamiltonian_field_matches_pointwise():
    cost = QuadraticCost(3, AffineTheta(1.0, 0.5), Potential((0.0, 1.0, 0.5), (0.2, 0.0, -0.1)))
    rng = np.random.default_rng(0)
    cells = np.array([0.1, 0.6])
    grad = rng.normal(size=(2, 3, 3))
    grad[:, np.arange(3), np.arange(3)] = 0.0
    field = cost.hamiltonian_field(grad, cells)
    for k, u in enumerate(cells):
        for x in range(3):
            assert field[k, x] == pytest.approx(hamiltonian(cost, x, grad[k, x], u), abs=1e-12)


def test_projected_newton_matches_closed_form():
    generic = _quadratic_generic(4, 1.5)
    closed = QuadraticCost(4, ConstantTheta(1.5))
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = int(rng.integers(4))
        p = rng.normal(scale=2.0, size=4)
        np.testing.assert_allclose(argmin_rates(generic, x, p, 0.5), argmin_rates(closed, x, p, 0.5), atol=1e-8)
        assert hamiltonian(generic, x, p, 0.5) == pytest.approx(hamiltonian(closed, x, p, 0.5), abs=1e-10)


def test_quartic_minimizer_first_order_conditions():
    cost = QuarticCost(3, kappa=1.0)
    a = argmin_rates(cost, 1, [-3.0, 0.0, 0.5], 0.2)
    assert a[1] == 0.0
    assert a[2] == 0.0
    # theta a + kappa a^3 = -p on the active coordinate
    assert a[0] + a[0] ** 3 == pytest.approx(3.0, abs=1e-8)


def test_generic_field_versions_loop_over_cells():
    cost = QuarticCost(2, kappa=0.5, theta=AffineTheta(1.0, 1.0))
    cells = np.array([0.0, 1.0])
    grad = np.array([[[0.0, -1.0], [0.5, 0.0]], [[0.0, -1.0], [0.5, 0.0]]])
    rates = cost.minimizer_field(grad, cells)
    # larger theta at u = 1 means a smaller rate
    assert rates[0, 0, 1] > rates[1, 0, 1] > 0
    np.testing.assert_array_equal(rates[:, 1, 0], 0.0)


def test_check_gradient_accepts_consistent_and_rejects_wrong_gradient():
    assert check_gradient(QuarticCost(3, kappa=0.7)) <= 1e-6

    def lagrangian(x, a, u):
        return 0.5 * float(a @ a)

    def wrong(x, a, u):
        return 2.0 * a

    with pytest.raises(ConfigError):
        check_gradient(GenericCost(3, lagrangian, wrong, 0.5))


def test_invalid_parameters():
    with pytest.raises(ConfigError):
        ConstantTheta(0.0)
    with pytest.raises(ConfigError):
        AffineTheta(1.0, -2.0)
    with pytest.raises(ConfigError):
        QuadraticCost(1)
    with pytest.raises(ConfigError):
        argmin_rates(QuadraticCost(2), 0, [0.0, np.nan], 0.0)


def test_cost_configs():
    cost = QuarticCost(2, kappa=0.5, theta=AffineTheta(1.0, 0.5), potential=Potential((0.0, 1.0)))
    assert cost.to_config() == {
        "kind": "quadratic_quartic",
        "kappa": 0.5,
        "theta": {"kind": "affine", "intercept": 1.0, "slope": 0.5},
        "potential": {"base": [0.0, 1.0]},
    }
    assert QuadraticCost(2).gamma == pytest.approx(0.5)


@pytest.mark.parametrize("cost", [QuadraticCost(3, ConstantTheta(1.5)), QuarticCost(3, kappa=0.7, theta=ConstantTheta(1.5))])
def test_minimizer_complementarity_and_lipschitz_bound(cost):
    rng = np.random.default_rng(5)
    for _ in range(10_000):
        x = int(rng.integers(3))
        p, q = rng.normal(scale=2.0, size=(2, 3))
        a = argmin_rates(cost, x, p, 0.5)
        b = argmin_rates(cost, x, q, 0.5)
        others = np.arange(3) != x
        slack = (cost.lagrangian_gradient(x, a, 0.5) + p)[others]
        assert np.all(a[others] >= 0)
        assert np.all(slack >= -1e-8)
        assert np.all(np.abs(a[others] * slack) <= 1e-8)
        assert np.linalg.norm(a - b) <= np.linalg.norm((p - q)[others]) / cost.gamma + 1e-9


COSTS = [
    QuadraticCost(3, AffineTheta(1.0, 0.5), Potential((0.0, 1.0, 0.5))),
    QuarticCost(3, kappa=0.7, theta=ConstantTheta(1.5), potential=Potential((0.2, 0.0, 0.4))),
]


@pytest.mark.parametrize("cost", COSTS)
def test_hamiltonian_is_convex_in_p(cost):
    rng = np.random.default_rng(9)
    for _ in range(500):
        x = int(rng.integers(3))
        u = float(rng.random())
        p, q = rng.normal(scale=2.0, size=(2, 3))
        lam = float(rng.random())
        mixed = hamiltonian(cost, x, lam * p + (1 - lam) * q, u)
        chord = lam * hamiltonian(cost, x, p, u) + (1 - lam) * hamiltonian(cost, x, q, u)
        assert mixed <= chord + 1e-9


@pytest.mark.parametrize("cost", COSTS)
def test_hamiltonian_gradient_is_minus_the_minimizer(cost):
    rng = np.random.default_rng(10)
    h = 1e-6
    for _ in range(200):
        x = int(rng.integers(3))
        u = float(rng.random())
        p = rng.normal(scale=2.0, size=3)
        a = argmin_rates(cost, x, p, u)
        for y in range(3):
            if y == x:
                continue
            step = np.zeros(3)
            step[y] = h
            slope = (hamiltonian(cost, x, p + step, u) - hamiltonian(cost, x, p - step, u)) / (2 * h)
            assert slope == pytest.approx(-a[y], abs=1e-5)
