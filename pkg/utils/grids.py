from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Literal, Sequence

import numpy as np

from utils import streams
from utils.errors import ConfigError, GridMismatchError


def _frozen(values: Any, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StateSpace:
    d: int  # states are 0..d-1 internally, printed as 1..d

    def __post_init__(self) -> None:
        if int(self.d) < 2:
            raise ConfigError(f"state space needs d >= 2, got {self.d}")


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if int(self.n_steps) < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def slab_index(self, t: np.ndarray) -> np.ndarray:
        """Index k of the slab [t_k, t_{k+1}) containing t; t = T maps to the last slab."""
        k = np.floor(np.asarray(t, dtype=float) / self.dt).astype(np.int64)
        return np.clip(k, 0, self.n_steps - 1)

    def check_same(self, other: "TimeGrid") -> None:
        if self.n_steps != other.n_steps or not np.isclose(self.horizon, other.horizon, rtol=0, atol=1e-12):
            raise GridMismatchError(f"time grids differ: {self} vs {other}")


@dataclass(frozen=True)
class PositionAtlas:
    """Finite quantisation of the position space: cells u_k with weights mu_k."""

    cells: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        cells = _frozen(self.cells)
        weights = _frozen(self.weights)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "weights", weights)
        if cells.ndim != 1 or cells.size == 0:
            raise ConfigError("atlas needs a non-empty 1-d list of cells")
        if weights.shape != cells.shape:
            raise ConfigError("atlas cells and weights must have the same length")
        if np.any(weights < 0):
            raise ConfigError("atlas weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError(f"atlas weights must sum to 1, got {weights.sum():.15g}")
        if np.unique(cells).size != cells.size:
            raise ConfigError("atlas cells must be distinct")

    @property
    def size(self) -> int:
        return int(self.cells.size)

    def nearest(self, positions: Sequence[float] | np.ndarray) -> np.ndarray:
        """Nearest-cell lookup (ties go to the lower index)."""
        u = np.atleast_1d(np.asarray(positions, dtype=float))
        return np.argmin(np.abs(u[:, None] - self.cells[None, :]), axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {"cells": self.cells.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "PositionAtlas":
        return cls(cells=payload["cells"], weights=payload["weights"])

    def check_same(self, other: "PositionAtlas") -> None:
        if self.size != other.size or not np.allclose(self.cells, other.cells, rtol=0, atol=1e-12):
            raise GridMismatchError("position atlases differ")


def uniform_atlas(n_cells: int, placement: Literal["right", "midpoint"] = "right") -> PositionAtlas:
    """
    Quantise Lebesgue measure on [0,1] into n_cells equal cells.

    placement="right" puts cell k at k/M (k=1..M), which lines up with players
    labelled u_i = i/N; "midpoint" uses (k - 1/2)/M.
    """
    if n_cells < 1:
        raise ConfigError(f"uniform atlas needs at least one cell, got {n_cells}")
    k = np.arange(1, n_cells + 1, dtype=float)
    cells = k / n_cells if placement == "right" else (k - 0.5) / n_cells
    return PositionAtlas(cells=cells, weights=np.full(n_cells, 1.0 / n_cells))


@dataclass(frozen=True)
class PlayerLayout:
    positions: np.ndarray

    def __post_init__(self) -> None:
        positions = _frozen(self.positions)
        object.__setattr__(self, "positions", positions)
        if positions.ndim != 1 or positions.size < 1:
            raise ConfigError("player layout needs at least one position")
        if np.unique(positions).size != positions.size:
            raise ConfigError("players must have pairwise distinct positions")

    @property
    def n_players(self) -> int:
        return int(self.positions.size)


def grid_layout(n_players: int) -> PlayerLayout:
    """Players at u_i = i/N, i = 1..N."""
    return PlayerLayout(np.arange(1, n_players + 1, dtype=float) / n_players)


def random_layout(n_players: int, seed: int) -> PlayerLayout:
    """Players at i.i.d. uniform positions on [0,1] (distinct almost surely)."""
    rng = streams.stream(seed, streams.LAYOUT)
    return PlayerLayout(np.sort(rng.random(n_players)))
