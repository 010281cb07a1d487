from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from utils.errors import ConfigError, GridMismatchError
from utils.grids import PositionAtlas

MASS_TOLERANCE = 1e-8
NEGATIVE_TOLERANCE = 1e-9


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MeasureFlow:
    """Conditional state distributions m_x(t_k, u_cell), shape (n_steps + 1, M, d)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        object.__setattr__(self, "values", values)
        if values.ndim != 3:
            raise ConfigError(f"measure flow must be (time, cell, state), got shape {values.shape}")
        if np.any(values < -NEGATIVE_TOLERANCE):
            raise ConfigError(f"measure flow has negative mass {values.min():.3e}")
        drift = np.abs(values.sum(axis=-1) - 1.0).max()
        if drift > MASS_TOLERANCE:
            raise ConfigError(f"measure flow rows must sum to 1 (max drift {drift:.3e})")

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def n_cells(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def at(self, k: int) -> np.ndarray:
        return self.values[k]

    @classmethod
    def frozen_at(cls, m0: np.ndarray, n_steps: int) -> "MeasureFlow":
        """The flow that keeps m0 for every grid time."""
        m0 = np.asarray(m0, dtype=float)
        return cls(np.broadcast_to(m0, (n_steps + 1, *m0.shape)))


@dataclass(frozen=True)
class ValueField:
    """V(t_k, u_cell, x), shape (n_steps + 1, M, d)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        object.__setattr__(self, "values", values)
        if values.ndim != 3:
            raise ConfigError(f"value field must be (time, cell, state), got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigError("value field has non-finite entries")

    def gradient(self) -> np.ndarray:
        """grad V(x) = (V(y) - V(x))_y, shape (..., M, d_from, d_to); the diagonal is 0."""
        return gradient(self.values)


def gradient(values: np.ndarray) -> np.ndarray:
    return values[..., None, :] - values[..., :, None]


@dataclass(frozen=True)
class Policy:
    """Jump rates alpha(t_k, cell, x -> y), shape (n_steps + 1, M, d, d); diagonal stored as 0."""

    rates: np.ndarray
    rate_cap: float

    def __post_init__(self) -> None:
        rates = np.array(self.rates, dtype=float)
        if rates.ndim != 4 or rates.shape[-1] != rates.shape[-2]:
            raise ConfigError(f"policy must be (time, cell, from, to), got shape {rates.shape}")
        d = rates.shape[-1]
        rates[..., np.arange(d), np.arange(d)] = 0.0
        if np.any(rates < 0):
            raise ConfigError("policy rates must be nonnegative")
        if np.any(rates > self.rate_cap):
            raise ConfigError(f"policy rate {rates.max():.3e} exceeds cap {self.rate_cap:.3e}")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    @property
    def d(self) -> int:
        return self.rates.shape[-1]

    def generator(self, k: int) -> np.ndarray:
        """Q matrices for time index k, diagonal carrying the negative row sum: (M, d, d)."""
        return generator(self.rates[k])


def generator(rates: np.ndarray) -> np.ndarray:
    q = np.array(rates, dtype=float)
    d = q.shape[-1]
    q[..., np.arange(d), np.arange(d)] = 0.0
    q[..., np.arange(d), np.arange(d)] = -q.sum(axis=-1)
    return q


def flow_distance(m1: MeasureFlow, m2: MeasureFlow, atlas: PositionAtlas) -> float:
    """sup over grid times of the mu-weighted L1 distance between two flows."""
    if m1.values.shape != m2.values.shape:
        raise GridMismatchError(f"flow shapes differ: {m1.values.shape} vs {m2.values.shape}")
    if m1.n_cells != atlas.size:
        raise GridMismatchError(f"flow has {m1.n_cells} cells but the atlas has {atlas.size}")
    per_time = np.einsum("tkx,k->t", np.abs(m1.values - m2.values), atlas.weights)
    return float(per_time.max())
