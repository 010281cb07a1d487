from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np

from config import NEWTON_MAX_ITERATIONS, NEWTON_TOLERANCE
from utils.errors import ConfigError, MinimizerError

logger = logging.getLogger(__name__)

Lagrangian = Callable[[int, np.ndarray, float], float]
LagrangianGradient = Callable[[int, np.ndarray, float], np.ndarray]
ArgminOracle = Callable[[int, np.ndarray, float], np.ndarray]


# ---------- position-dependent coefficients ----------
@dataclass(frozen=True)
class ConstantTheta:
    value: float

    def __post_init__(self) -> None:
        if not self.value > 0:
            raise ConfigError(f"theta must be positive, got {self.value}")

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return np.full(np.shape(u), float(self.value))

    @property
    def minimum(self) -> float:
        return float(self.value)

    def to_config(self) -> Dict[str, Any]:
        return {"kind": "constant", "value": self.value}


@dataclass(frozen=True)
class AffineTheta:
    """theta(u) = intercept + slope * u, positive on U = [0,1]."""

    intercept: float
    slope: float

    def __post_init__(self) -> None:
        if not self.minimum > 0:
            raise ConfigError(f"theta(u) = {self.intercept} + {self.slope} u is not positive on [0,1]")

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.intercept + self.slope * np.asarray(u, dtype=float)

    @property
    def minimum(self) -> float:
        return float(min(self.intercept, self.intercept + self.slope))

    def to_config(self) -> Dict[str, Any]:
        return {"kind": "affine", "intercept": self.intercept, "slope": self.slope}


@dataclass(frozen=True)
class Potential:
    """c(x,u) = base[x] + slope[x] * u."""

    base: tuple
    slope: Optional[tuple] = None

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        base = np.asarray(self.base, dtype=float)
        slope = np.zeros_like(base) if self.slope is None else np.asarray(self.slope, dtype=float)
        return base + u[..., None] * slope

    def to_config(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"base": list(self.base)}
        if self.slope is not None:
            out["slope"] = list(self.slope)
        return out


def zero_potential(d: int) -> Potential:
    return Potential(base=tuple([0.0] * d))


# ---------- cost models ----------
class CostModel(ABC):
    """Running cost L(x, a, u) over nonnegative rate vectors a."""

    d: int

    @property
    @abstractmethod
    def gamma(self) -> float:
        """Strong-convexity constant of L in a."""

    @abstractmethod
    def lagrangian(self, x: int, a: np.ndarray, u: float) -> float: ...

    @abstractmethod
    def lagrangian_gradient(self, x: int, a: np.ndarray, u: float) -> np.ndarray: ...

    @abstractmethod
    def minimizer(self, x: int, p: np.ndarray, u: float) -> np.ndarray: ...

    def to_config(self) -> Dict[str, Any]:
        raise ConfigError(f"{type(self).__name__} has no configuration form")

    # Field versions work on gradients shaped (..., M, d_from, d_to) with one
    # position per cell. Subclasses with closed forms override them.
    def minimizer_field(self, grad: np.ndarray, cells: np.ndarray) -> np.ndarray:
        out = np.zeros_like(grad, dtype=float)
        for idx in np.ndindex(*grad.shape[:-2]):
            u = float(cells[idx[-1]])
            for x in range(self.d):
                out[idx + (x,)] = self.minimizer(x, grad[idx + (x,)], u)
        return out

    def hamiltonian_field(self, grad: np.ndarray, cells: np.ndarray) -> np.ndarray:
        rates = self.minimizer_field(grad, cells)
        return -(np.sum(rates * grad, axis=-1) + self.running_cost_field(rates, cells))

    def running_cost_field(self, rates: np.ndarray, cells: np.ndarray) -> np.ndarray:
        out = np.zeros(rates.shape[:-1], dtype=float)
        for idx in np.ndindex(*rates.shape[:-2]):
            u = float(cells[idx[-1]])
            for x in range(self.d):
                out[idx + (x,)] = self.lagrangian(x, rates[idx + (x,)], u)
        return out


@dataclass(frozen=True)
class QuadraticCost(CostModel):
    """L(x,a,u) = theta(u)/2 * sum_{y != x} a_y^2 + c(x,u); closed-form minimizer."""

    d: int
    theta: Callable[[np.ndarray], np.ndarray] = field(default_factory=lambda: ConstantTheta(1.0))
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None
    theta_min: Optional[float] = None

    def __post_init__(self) -> None:
        if self.d < 2:
            raise ConfigError(f"cost needs d >= 2, got {self.d}")
        if self.potential is None:
            object.__setattr__(self, "potential", zero_potential(self.d))
        if self.theta_min is None:
            minimum = getattr(self.theta, "minimum", None)
            if minimum is None:
                raise ConfigError("a custom theta(u) needs an explicit theta_min")
            object.__setattr__(self, "theta_min", float(minimum))
        if not self.theta_min > 0:
            raise ConfigError(f"theta_min must be positive, got {self.theta_min}")

    @property
    def gamma(self) -> float:
        return self.theta_min / 2.0

    def lagrangian(self, x: int, a: np.ndarray, u: float) -> float:
        a = np.asarray(a, dtype=float).copy()
        a[x] = 0.0
        theta = float(self.theta(np.asarray(u)))
        return 0.5 * theta * float(a @ a) + float(self.potential(np.asarray(u))[x])

    def lagrangian_gradient(self, x: int, a: np.ndarray, u: float) -> np.ndarray:
        g = float(self.theta(np.asarray(u))) * np.asarray(a, dtype=float)
        g[x] = 0.0
        return g

    def minimizer(self, x: int, p: np.ndarray, u: float) -> np.ndarray:
        a = np.maximum(0.0, -np.asarray(p, dtype=float) / float(self.theta(np.asarray(u))))
        a[x] = 0.0
        return a

    def minimizer_field(self, grad: np.ndarray, cells: np.ndarray) -> np.ndarray:
        theta = self.theta(cells)[:, None, None]
        rates = np.maximum(0.0, -grad / theta)
        d = grad.shape[-1]
        rates[..., np.arange(d), np.arange(d)] = 0.0
        return rates

    def hamiltonian_field(self, grad: np.ndarray, cells: np.ndarray) -> np.ndarray:
        theta = self.theta(cells)[:, None]
        neg = np.minimum(0.0, grad)
        d = grad.shape[-1]
        neg[..., np.arange(d), np.arange(d)] = 0.0
        return np.sum(neg * neg, axis=-1) / (2.0 * theta) - self.potential(cells)

    def running_cost_field(self, rates: np.ndarray, cells: np.ndarray) -> np.ndarray:
        theta = self.theta(cells)[:, None]
        off = np.array(rates, dtype=float)
        d = off.shape[-1]
        off[..., np.arange(d), np.arange(d)] = 0.0
        return 0.5 * theta * np.sum(off * off, axis=-1) + self.potential(cells)

    def to_config(self) -> Dict[str, Any]:
        return {"kind": "quadratic", "theta": _theta_config(self.theta), "potential": _potential_config(self.potential)}


@dataclass(frozen=True)
class GenericCost(CostModel):
    """User-supplied L and grad_a L; the minimizer is found by projected Newton unless an oracle is given."""

    d: int
    lagrangian_fn: Lagrangian
    gradient_fn: LagrangianGradient
    gamma_value: float
    argmin_oracle: Optional[ArgminOracle] = None

    def __post_init__(self) -> None:
        if not self.gamma_value > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma_value}")

    @property
    def gamma(self) -> float:
        return float(self.gamma_value)

    def lagrangian(self, x: int, a: np.ndarray, u: float) -> float:
        return float(self.lagrangian_fn(x, np.asarray(a, dtype=float), u))

    def lagrangian_gradient(self, x: int, a: np.ndarray, u: float) -> np.ndarray:
        g = np.array(self.gradient_fn(x, np.asarray(a, dtype=float), u), dtype=float)
        g[x] = 0.0
        return g

    def minimizer(self, x: int, p: np.ndarray, u: float) -> np.ndarray:
        if self.argmin_oracle is not None:
            a = np.array(self.argmin_oracle(x, np.asarray(p, dtype=float), u), dtype=float)
            a[x] = 0.0
            return a
        return projected_newton(self, x, np.asarray(p, dtype=float), u)


class QuarticCost(GenericCost):
    """L = theta(u)/2 sum a^2 + kappa/4 sum a^4 + c(x,u): strongly convex, no closed-form minimizer."""

    def __init__(self, d: int, kappa: float, theta=None, potential=None):
        theta = theta if theta is not None else ConstantTheta(1.0)
        potential = potential if potential is not None else zero_potential(d)
        if kappa < 0:
            raise ConfigError(f"kappa must be nonnegative, got {kappa}")

        def lagrangian_fn(x: int, a: np.ndarray, u: float) -> float:
            b = a.copy()
            b[x] = 0.0
            th = float(theta(np.asarray(u)))
            return 0.5 * th * float(b @ b) + 0.25 * kappa * float(np.sum(b**4)) + float(potential(np.asarray(u))[x])

        def gradient_fn(x: int, a: np.ndarray, u: float) -> np.ndarray:
            th = float(theta(np.asarray(u)))
            g = th * a + kappa * a**3
            g[x] = 0.0
            return g

        super().__init__(d=d, lagrangian_fn=lagrangian_fn, gradient_fn=gradient_fn, gamma_value=theta.minimum / 2.0)
        object.__setattr__(self, "kappa", float(kappa))
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "potential", potential)

    def to_config(self) -> Dict[str, Any]:
        return {
            "kind": "quadratic_quartic",
            "kappa": self.kappa,
            "theta": _theta_config(self.theta),
            "potential": _potential_config(self.potential),
        }


def _theta_config(theta: Any) -> Dict[str, Any]:
    if not hasattr(theta, "to_config"):
        raise ConfigError("custom theta(u) functions cannot be serialized")
    return theta.to_config()


def _potential_config(potential: Any) -> Dict[str, Any]:
    if not hasattr(potential, "to_config"):
        raise ConfigError("custom potentials cannot be serialized")
    return potential.to_config()


# ---------- minimizer ----------
def projected_newton(
    cost: CostModel,
    x: int,
    p: np.ndarray,
    u: float,
    tol: float = NEWTON_TOLERANCE,
    max_iterations: int = NEWTON_MAX_ITERATIONS,
) -> np.ndarray:
    """
    Minimize sum_{y != x} a_y p_y + L(x, a, u) over a >= 0 with a_x = 0.

    Newton steps on the free coordinates (Hessian from forward differences of
    the supplied gradient), projection onto the orthant, Armijo backtracking
    along the projection arc.
    """
    d = cost.d
    mask = np.ones(d, dtype=bool)
    mask[x] = False
    p = np.where(mask, p, 0.0)

    def objective(a: np.ndarray) -> float:
        return float(p @ a) + cost.lagrangian(x, a, u)

    def gradient(a: np.ndarray) -> np.ndarray:
        return np.where(mask, p + cost.lagrangian_gradient(x, a, u), 0.0)

    a = np.zeros(d)
    residual = np.inf
    for _ in range(max_iterations):
        g = gradient(a)
        projected = np.where(a > 0, g, np.minimum(g, 0.0))
        residual = float(np.max(np.abs(projected)))
        if residual <= tol:
            return a

        active = ~mask | ((a <= 1e-14) & (g > 0))
        free = np.flatnonzero(~active)
        direction = np.zeros(d)
        if free.size:
            hess = _forward_hessian(gradient, a, free)
            try:
                step = np.linalg.solve(hess, g[free])
                direction[free] = -step if float(g[free] @ step) > 0 else -g[free]
            except np.linalg.LinAlgError:
                direction[free] = -g[free]

        f0 = objective(a)
        s = 1.0
        while True:
            trial = np.maximum(0.0, a + s * direction)
            trial[x] = 0.0
            if objective(trial) <= f0 + 1e-4 * float(g @ (trial - a)) or s < 1e-12:
                break
            s *= 0.5
        a = trial

    raise MinimizerError(f"projected Newton did not converge for x={x}, u={u}", last_iterate=a, residual=residual)


def _forward_hessian(gradient: Callable[[np.ndarray], np.ndarray], a: np.ndarray, free: np.ndarray) -> np.ndarray:
    g0 = gradient(a)
    hess = np.zeros((free.size, free.size))
    for col, j in enumerate(free):
        h = 1e-6 * max(1.0, abs(a[j]))
        shifted = a.copy()
        shifted[j] += h
        hess[:, col] = (gradient(shifted) - g0)[free] / h
    return 0.5 * (hess + hess.T)


# ---------- public operations ----------
def argmin_rates(cost: CostModel, x: int, p: Sequence[float] | np.ndarray, u: float) -> np.ndarray:
    """Unique minimizer a*(x, p, u) of sum_{y != x} a_y p_y + L(x, a, u) over a >= 0; a*_x = 0."""
    p = np.asarray(p, dtype=float)
    if p.shape != (cost.d,) or not np.all(np.isfinite(p)):
        raise ConfigError(f"p must be a finite vector of length {cost.d}")
    return cost.minimizer(x, p, u)


def hamiltonian(cost: CostModel, x: int, p: Sequence[float] | np.ndarray, u: float) -> float:
    """H(x, p, u) = -inf_a [sum_{y != x} a_y p_y + L(x, a, u)]."""
    p = np.asarray(p, dtype=float)
    a = argmin_rates(cost, x, p, u)
    mask = np.arange(cost.d) != x
    return -(float(np.sum(a[mask] * p[mask])) + cost.lagrangian(x, a, u))


def check_gradient(cost: CostModel, n_points: int = 32, seed: int = 0, rtol: float = 1e-6) -> float:
    """
    Compare grad_a L with central differences of L at random points.

    Returns the largest relative discrepancy; raises ConfigError above rtol.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        x = int(rng.integers(cost.d))
        a = rng.uniform(0.5, 3.0, size=cost.d)
        u = float(rng.random())
        g = cost.lagrangian_gradient(x, a, u)
        for y in range(cost.d):
            if y == x:
                continue
            h = 1e-5 * max(1.0, abs(a[y]))
            up, down = a.copy(), a.copy()
            up[y] += h
            down[y] -= h
            fd = (cost.lagrangian(x, up, u) - cost.lagrangian(x, down, u)) / (2 * h)
            worst = max(worst, abs(fd - g[y]) / max(1.0, abs(g[y])))
    if worst > rtol:
        raise ConfigError(f"grad_a L disagrees with finite differences (relative error {worst:.2e})")
    logger.debug("gradient check passed, worst relative error %.2e", worst)
    return worst
