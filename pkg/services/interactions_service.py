from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ConfigError
from utils.grids import PlayerLayout, PositionAtlas

KernelFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
# f(x, q): state x and probability vectors q of shape (..., d) -> values of shape (...)
LowResFn = Callable[[int, np.ndarray], np.ndarray]

SMOOTHING_FLOOR = 1e-14
KERNEL_NAMES = ("constant", "average", "product", "gaussian", "min", "indicator_band")


# ---------- kernels ----------
@dataclass(frozen=True)
class Kernel:
    name: str
    fn: KernelFn
    params: Tuple[Tuple[str, float], ...] = ()
    bound: float = math.inf

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return np.broadcast_to(np.asarray(self.fn(u, v), dtype=float), np.broadcast(u, v).shape)

    def matrix(self, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        return np.array(self(np.asarray(us)[:, None], np.asarray(vs)[None, :]))

    def to_config(self) -> Dict[str, Any]:
        if self.name not in KERNEL_NAMES:
            raise ConfigError(f"{self.name} kernels cannot be serialized")
        return {"name": self.name, **dict(self.params)}


def make_kernel(name: str, **params: float) -> Kernel:
    """Build a kernel from the named registry."""
    scale = float(params.get("scale", 1.0))
    if name == "constant":
        value = float(params.get("value", 1.0))
        return Kernel(name, lambda u, v: np.full(np.broadcast(u, v).shape, value), (("value", value),), abs(value))
    if name == "average":
        return Kernel(name, lambda u, v: scale * (u + v) / 2.0, (("scale", scale),), abs(scale))
    if name == "product":
        return Kernel(name, lambda u, v: scale * u * v, (("scale", scale),), abs(scale))
    if name == "min":
        return Kernel(name, lambda u, v: scale * np.minimum(u, v), (("scale", scale),), abs(scale))
    if name == "gaussian":
        bandwidth = float(params.get("bandwidth", 0.1))
        if not bandwidth > 0:
            raise ConfigError("gaussian kernel needs a positive bandwidth")
        return Kernel(
            name,
            lambda u, v: scale * np.exp(-((u - v) ** 2) / (2.0 * bandwidth**2)),
            (("bandwidth", bandwidth), ("scale", scale)),
            abs(scale),
        )
    if name == "indicator_band":
        width = float(params.get("width", 0.1))
        return Kernel(name, lambda u, v: (np.abs(u - v) <= width).astype(float), (("width", width),), 1.0)
    raise ConfigError(f"unknown kernel: {name}")


def custom_kernel(fn: KernelFn, bound: float = math.inf) -> Kernel:
    return Kernel("custom", fn, (), bound)


# ---------- low-resolution f(x, q) families ----------
@dataclass(frozen=True)
class LinearLowRes:
    """f(x, q) = sum_y B[x, y] q_y."""

    matrix: np.ndarray

    def __call__(self, x: int, q: np.ndarray) -> np.ndarray:
        return np.asarray(q, dtype=float) @ np.asarray(self.matrix, dtype=float)[x]

    def to_config(self) -> Dict[str, Any]:
        return {"kind": "linear", "matrix": np.asarray(self.matrix, dtype=float).tolist()}


@dataclass(frozen=True)
class PowerLowRes:
    """f(x, q) = scale * q_x ** exponent (congestion in the locally averaged state)."""

    exponent: float = 2.0
    scale: float = 1.0

    def __call__(self, x: int, q: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(q, dtype=float)[..., x] ** self.exponent

    def to_config(self) -> Dict[str, Any]:
        return {"kind": "power", "exponent": self.exponent, "scale": self.scale}


# ---------- measures ----------
@dataclass(frozen=True)
class DiscreteMeasure:
    """Atoms (position, state, mass) of a probability measure on U x Sigma."""

    positions: np.ndarray
    states: np.ndarray
    masses: np.ndarray

    def __post_init__(self) -> None:
        positions = np.array(self.positions, dtype=float)
        states = np.array(self.states, dtype=np.int64)
        masses = np.array(self.masses, dtype=float)
        for arr in (positions, states, masses):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "masses", masses)
        if not (positions.shape == states.shape == masses.shape) or positions.ndim != 1:
            raise ConfigError("atoms need matching 1-d positions, states and masses")
        if np.any(masses < 0) or abs(masses.sum() - 1.0) > 1e-12:
            raise ConfigError("atom masses must be nonnegative and sum to 1")

    def atoms(self) -> list[tuple[float, int, float]]:
        return list(zip(self.positions.tolist(), self.states.tolist(), self.masses.tolist()))

    def onehot(self, d: int) -> np.ndarray:
        return np.eye(d)[self.states]


def empirical_measure(layout: PlayerLayout, states: Sequence[int] | np.ndarray, i: int) -> DiscreteMeasure:
    """m^{N,i}: uniform measure on (u_j, x_j) for every player j != i (0-based i)."""
    n = layout.n_players
    states = np.asarray(states, dtype=np.int64)
    if n < 2:
        raise ConfigError("the empirical measure of the other players needs N >= 2")
    if states.shape != (n,):
        raise ConfigError(f"expected {n} states, got shape {states.shape}")
    if not 0 <= i < n:
        raise ConfigError(f"player index {i} out of range for N={n}")
    others = np.arange(n) != i
    return DiscreteMeasure(layout.positions[others], states[others], np.full(n - 1, 1.0 / (n - 1)))


# ---------- interactions ----------
def _require_opponents(n: int) -> None:
    if n < 2:
        raise ConfigError(f"F_N averages over the other players and needs N >= 2, got N={n}")


class InteractionSpec(ABC):
    """An interaction functional F(x, m, u) (or G)."""

    linear: bool = True

    @abstractmethod
    def cell_values(self, densities: np.ndarray, atlas: PositionAtlas, positions: np.ndarray) -> np.ndarray:
        """F(x, m, u) for cell densities (..., M, d), at each position: (..., P, d)."""

    @abstractmethod
    def measure_values(self, measure: DiscreteMeasure, positions: np.ndarray, d: int, atlas: PositionAtlas) -> np.ndarray:
        """F(x, m, u) for a discrete measure, at each position: (P, d)."""

    @abstractmethod
    def player_values(self, positions: np.ndarray, states: np.ndarray, d: int, atlas: PositionAtlas) -> np.ndarray:
        """F_N(x, m^{N,i}_X, u_i) for every hypothetical own state x: states (R, N) -> (R, N, d)."""

    def cell_field(self, densities: np.ndarray, atlas: PositionAtlas) -> np.ndarray:
        return self.cell_values(densities, atlas, atlas.cells)

    def to_config(self) -> Dict[str, Any]:
        raise ConfigError(f"{type(self).__name__} cannot be serialized")

    def validate(self, atlas: PositionAtlas, d: int) -> None:
        """Check declared bounds on the atlas grid."""


class LinearInteraction(InteractionSpec):
    """Interactions linear in m: F(x, m, u) = int W(u, v) f(x, y) m(dv, dy)."""

    f: np.ndarray

    @abstractmethod
    def weights(self, us: np.ndarray, vs: np.ndarray, atlas: PositionAtlas) -> np.ndarray:
        """W(u, v) as a (len(us), len(vs)) matrix."""

    def cell_values(self, densities, atlas, positions):
        w = self.weights(np.asarray(positions, dtype=float), atlas.cells, atlas) * atlas.weights[None, :]
        pooled = np.einsum("pk,...ky->...py", w, densities)
        return pooled @ np.asarray(self.f, dtype=float).T

    def measure_values(self, measure, positions, d, atlas):
        w = self.weights(np.asarray(positions, dtype=float), measure.positions, atlas) * measure.masses[None, :]
        return (w @ measure.onehot(d)) @ np.asarray(self.f, dtype=float).T

    def opponent_matrix(self, positions: np.ndarray, atlas: PositionAtlas) -> np.ndarray:
        """A_ij = W(u_i, u_j) / (N - 1) with a zero diagonal."""
        n = len(positions)
        _require_opponents(n)
        a = self.weights(positions, positions, atlas) / (n - 1)
        np.fill_diagonal(a, 0.0)
        return a

    def mixed_values(self, positions: np.ndarray, opponent_laws: np.ndarray, atlas: PositionAtlas) -> np.ndarray:
        """F_N against independent opponents with state laws (..., N, d): (..., N, d)."""
        pooled = np.einsum("ij,...jy->...iy", self.opponent_matrix(positions, atlas), opponent_laws)
        return pooled @ np.asarray(self.f, dtype=float).T

    def player_values(self, positions, states, d, atlas):
        return self.mixed_values(positions, np.eye(d)[np.asarray(states)], atlas)


@dataclass(frozen=True)
class ZeroInteraction(InteractionSpec):
    linear = True

    def cell_values(self, densities, atlas, positions):
        return np.zeros(np.asarray(densities).shape[:-2] + (len(positions), np.asarray(densities).shape[-1]))

    def measure_values(self, measure, positions, d, atlas):
        return np.zeros((len(positions), d))

    def player_values(self, positions, states, d, atlas):
        return np.zeros(np.asarray(states).shape + (d,))

    def mixed_values(self, positions, opponent_laws, atlas):
        return np.zeros_like(np.asarray(opponent_laws, dtype=float))

    def to_config(self) -> Dict[str, Any]:
        return {"kind": "zero"}


@dataclass(frozen=True)
class TwoBodyInteraction(LinearInteraction):
    """F(x, m, u) = int K(u, v) f(x, y) m(dv, dy)."""

    kernel: Kernel
    f: np.ndarray
    f_bound: Optional[float] = None

    def __post_init__(self) -> None:
        f = np.array(self.f, dtype=float)
        if f.ndim != 2 or f.shape[0] != f.shape[1]:
            raise ConfigError("two-body f must be a square d x d matrix")
        f.setflags(write=False)
        object.__setattr__(self, "f", f)
        if self.f_bound is not None and np.max(np.abs(f)) > self.f_bound:
            raise ConfigError(f"|f| exceeds its declared bound {self.f_bound}")

    def weights(self, us, vs, atlas):
        return self.kernel.matrix(us, vs)

    def validate(self, atlas: PositionAtlas, d: int) -> None:
        if self.f.shape != (d, d):
            raise ConfigError(f"two-body f must be {d} x {d}, got {self.f.shape}")
        values = self.kernel.matrix(atlas.cells, atlas.cells)
        if np.max(np.abs(values)) > self.kernel.bound:
            raise ConfigError(f"kernel {self.kernel.name} exceeds its declared bound {self.kernel.bound}")

    def to_config(self) -> Dict[str, Any]:
        return {"kind": "two_body", "kernel": self.kernel.to_config(), "f": self.f.tolist()}


@dataclass(frozen=True)
class LocalInteraction(LinearInteraction):
    """
    F(x, m, u) = sum_y f(x, y) m_y(u), realised with the kernel 1{cell(u) = cell(v)} / mu(cell).

    On the atlas this reads the density of the cell containing u; on an
    empirical measure it counts the atoms sharing that cell.
    """

    f: np.ndarray

    def __post_init__(self) -> None:
        f = np.array(self.f, dtype=float)
        if f.ndim != 2 or f.shape[0] != f.shape[1]:
            raise ConfigError("local f must be a square d x d matrix")
        f.setflags(write=False)
        object.__setattr__(self, "f", f)

    def weights(self, us, vs, atlas):
        cu = atlas.nearest(us)
        cv = atlas.nearest(vs)
        same = (cu[:, None] == cv[None, :]).astype(float)
        return same / atlas.weights[cu][:, None]

    def validate(self, atlas: PositionAtlas, d: int) -> None:
        if self.f.shape != (d, d):
            raise ConfigError(f"local f must be {d} x {d}, got {self.f.shape}")
        if np.any(atlas.weights <= 0):
            raise ConfigError("local interactions need every atlas cell to carry positive weight")

    def to_config(self) -> Dict[str, Any]:
        return {"kind": "local", "f": self.f.tolist()}


@dataclass(frozen=True)
class LowResInteraction(InteractionSpec):
    """
    F(x, m, u) = int K(u, v) f(x, m^phi(v)) mu(dv), where m^phi is the phi-weighted
    local average of the state distribution around v.
    """

    kernel: Kernel
    f: LowResFn
    smoothing: Kernel
    linear: bool = field(default=False, init=False)

    def _apply_f(self, q: np.ndarray, d: int) -> np.ndarray:
        return np.stack([np.asarray(self.f(x, q), dtype=float) for x in range(d)], axis=-1)

    def smoothed(self, densities: np.ndarray, atlas: PositionAtlas) -> np.ndarray:
        phi = self.smoothing.matrix(atlas.cells, atlas.cells) * atlas.weights[None, :]
        denom = phi.sum(axis=1)
        if np.any(denom < SMOOTHING_FLOOR):
            raise ConfigError("low-resolution smoothing weights vanish (phi must be positive)")
        return np.einsum("vw,...wy->...vy", phi, densities) / denom[:, None]

    def cell_values(self, densities, atlas, positions):
        densities = np.asarray(densities, dtype=float)
        q = self.smoothed(densities, atlas)
        fx = self._apply_f(q, densities.shape[-1])
        w = self.kernel.matrix(np.asarray(positions, dtype=float), atlas.cells) * atlas.weights[None, :]
        return np.einsum("pv,...vx->...px", w, fx)

    def measure_values(self, measure, positions, d, atlas):
        phi = self.smoothing.matrix(measure.positions, measure.positions) * measure.masses[None, :]
        denom = phi.sum(axis=1)
        if np.any(denom < SMOOTHING_FLOOR):
            raise ConfigError("low-resolution smoothing weights vanish (phi must be positive)")
        q = (phi @ measure.onehot(d)) / denom[:, None]
        fx = self._apply_f(q, d)
        w = self.kernel.matrix(np.asarray(positions, dtype=float), measure.positions) * measure.masses[None, :]
        return w @ fx

    def player_values(self, positions, states, d, atlas):
        positions = np.asarray(positions, dtype=float)
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        n = positions.size
        _require_opponents(n)
        phi = self.smoothing.matrix(positions, positions)
        kern = self.kernel.matrix(positions, positions)
        np.fill_diagonal(kern, 0.0)
        # denominators for measure m^{N,i}, atom j: sum_{k != i} phi[j, k]
        denom = phi.sum(axis=1)[None, :] - phi.T
        if np.any(denom[~np.eye(n, dtype=bool)] < SMOOTHING_FLOOR):
            raise ConfigError("low-resolution smoothing weights vanish (phi must be positive)")
        np.fill_diagonal(denom, 1.0)
        out = np.zeros(states.shape + (d,))
        for r, row in enumerate(states):
            onehot = np.eye(d)[row]
            full = phi @ onehot  # (j, y)
            num = full[None, :, :] - phi.T[:, :, None] * onehot[:, None, :]  # (i, j, y)
            fx = self._apply_f(num / denom[:, :, None], d)  # (i, j, x)
            out[r] = np.einsum("ij,ijx->ix", kern, fx) / (n - 1)
        return out

    def validate(self, atlas: PositionAtlas, d: int) -> None:
        phi = self.smoothing.matrix(atlas.cells, atlas.cells)
        if np.any(phi <= 0):
            raise ConfigError("low-resolution smoothing phi must be positive on every pair of cells")

    def to_config(self) -> Dict[str, Any]:
        if not hasattr(self.f, "to_config"):
            raise ConfigError("custom low-resolution f cannot be serialized")
        return {
            "kind": "low_res",
            "kernel": self.kernel.to_config(),
            "smoothing": self.smoothing.to_config(),
            "f_low_res": self.f.to_config(),
        }


def is_zero(spec: InteractionSpec) -> bool:
    return isinstance(spec, ZeroInteraction)


# ---------- public operation ----------
def _state_count(spec: InteractionSpec) -> int:
    """d as fixed by the interaction itself; atoms of a measure may leave the top states empty."""
    matrix = getattr(spec, "f", None)
    if isinstance(spec, LowResInteraction):
        matrix = getattr(spec.f, "matrix", None)
    if matrix is not None and not callable(matrix) and np.ndim(matrix) == 2:
        return np.shape(matrix)[0]
    raise ConfigError(f"{type(spec).__name__} does not fix the number of states; pass d explicitly")


def eval_interaction(
    spec: InteractionSpec,
    x: int,
    m: DiscreteMeasure | np.ndarray,
    u: float,
    atlas: PositionAtlas,
    d: Optional[int] = None,
) -> float:
    """
    F(x, m, u) for one state and position.

    m is either a DiscreteMeasure (atoms are used directly, no binning) or the
    cell densities m_y(u_k) of a flow at one time, shape (M, d).
    """
    positions = np.array([u], dtype=float)
    if isinstance(m, DiscreteMeasure):
        if d is None:
            d = _state_count(spec)
        return float(spec.measure_values(m, positions, d, atlas)[0, x])
    densities = np.asarray(m, dtype=float)
    if densities.shape[0] != atlas.size:
        raise ConfigError(f"densities cover {densities.shape[0]} cells but the atlas has {atlas.size}")
    return float(spec.cell_values(densities, atlas, positions)[0, x])
