from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_DAMPING,
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_RATE_CAP,
    DEFAULT_RESTARTS,
    DEFAULT_TOLERANCE,
)
from services.costs_service import (
    AffineTheta,
    ConstantTheta,
    CostModel,
    Potential,
    QuadraticCost,
    QuarticCost,
    check_gradient,
)
from services.interactions_service import (
    InteractionSpec,
    Kernel,
    LinearLowRes,
    LocalInteraction,
    LowResInteraction,
    PowerLowRes,
    TwoBodyInteraction,
    ZeroInteraction,
    make_kernel,
)
from services.solver_service import MfgModel, SolverConfig
from utils.errors import ConfigError
from utils.grids import PlayerLayout, PositionAtlas, StateSpace, TimeGrid, grid_layout, random_layout, uniform_atlas


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------- model block ----------
class AtlasBlock(StrictModel):
    kind: Literal["uniform", "explicit"] = "uniform"
    n_cells: int = Field(default=1, ge=1)
    placement: Literal["right", "midpoint"] = "right"
    cells: Optional[List[float]] = None
    weights: Optional[List[float]] = None

    @model_validator(mode="after")
    def _explicit_needs_cells(self) -> "AtlasBlock":
        if self.kind == "explicit" and (self.cells is None or self.weights is None):
            raise ValueError("an explicit atlas needs both cells and weights")
        return self


class ThetaBlock(StrictModel):
    kind: Literal["constant", "affine"] = "constant"
    value: float = Field(default=1.0, gt=0)
    intercept: float = 1.0
    slope: float = 0.0


class PotentialBlock(StrictModel):
    base: Optional[List[float]] = None
    slope: Optional[List[float]] = None


class CostBlock(StrictModel):
    kind: Literal["quadratic", "quadratic_quartic"] = "quadratic"
    theta: ThetaBlock = Field(default_factory=ThetaBlock)
    potential: PotentialBlock = Field(default_factory=PotentialBlock)
    kappa: float = Field(default=1.0, ge=0)


class KernelBlock(StrictModel):
    name: Literal["constant", "average", "product", "gaussian", "min", "indicator_band"] = "constant"
    value: Optional[float] = None
    scale: Optional[float] = None
    bandwidth: Optional[float] = None
    width: Optional[float] = None


class LowResFBlock(StrictModel):
    kind: Literal["linear", "power"] = "power"
    matrix: Optional[List[List[float]]] = None
    exponent: float = 2.0
    scale: float = 1.0


class InteractionBlock(StrictModel):
    kind: Literal["zero", "two_body", "local", "low_res"] = "zero"
    kernel: Optional[KernelBlock] = None
    f: Optional[List[List[float]]] = None
    smoothing: Optional[KernelBlock] = None
    f_low_res: Optional[LowResFBlock] = None

    @model_validator(mode="after")
    def _fields_for_kind(self) -> "InteractionBlock":
        if self.kind in ("two_body", "local") and self.f is None:
            raise ValueError(f"{self.kind} interactions need an f matrix")
        if self.kind == "two_body" and self.kernel is None:
            raise ValueError("two_body interactions need a kernel")
        if self.kind == "low_res" and (self.kernel is None or self.smoothing is None or self.f_low_res is None):
            raise ValueError("low_res interactions need kernel, smoothing and f_low_res")
        return self


class ModelBlock(StrictModel):
    states: int = Field(default=2, ge=2)
    horizon: float = Field(default=1.0, gt=0)
    n_steps: int = Field(default=100, ge=1)
    atlas: AtlasBlock = Field(default_factory=AtlasBlock)
    cost: CostBlock = Field(default_factory=CostBlock)
    F: InteractionBlock = Field(default_factory=InteractionBlock)
    G: InteractionBlock = Field(default_factory=InteractionBlock)
    m0: Union[List[float], List[List[float]]]


# ---------- workflow blocks ----------
class SolverBlock(StrictModel):
    damping: float = Field(default=DEFAULT_DAMPING, gt=0, le=1)
    tolerance: float = Field(default=DEFAULT_TOLERANCE, gt=0)
    max_iterations: int = Field(default=DEFAULT_MAX_ITERATIONS, ge=1)
    integrator: Literal["rk4", "implicit_euler"] = "rk4"
    mode: Literal["picard", "fictitious_play"] = "picard"
    initial_guess: Literal["frozen", "random"] = "frozen"
    seed: int = 0
    rate_cap: float = Field(default=DEFAULT_RATE_CAP, gt=0)


class SimulationBlock(StrictModel):
    n_players: Union[int, List[int]] = 20
    positions: Literal["grid", "uniform_random"] = "grid"
    n_runs: int = Field(default=1000, ge=1)
    seed: int = 0
    epsilon_grid: List[float] = Field(default_factory=lambda: [0.001, 0.01, 0.1])
    cost_estimator: Literal["monte_carlo", "policy_evaluation"] = "monte_carlo"
    best_response: Literal["exact", "heuristic"] = "exact"
    player_kernel: Literal["limit", "bernoulli"] = "limit"
    quantile: float = Field(default=0.9, ge=0, le=1)
    equilibrium_from: Optional[str] = None
    save_trajectories: bool = False
    block_size: int = Field(default=DEFAULT_BLOCK_SIZE, ge=1)

    @property
    def player_counts(self) -> List[int]:
        return [self.n_players] if isinstance(self.n_players, int) else list(self.n_players)


class GraphonBlock(StrictModel):
    kernel: KernelBlock = Field(default_factory=lambda: KernelBlock(name="average"))
    sizes: List[int] = Field(default_factory=lambda: [32, 256])
    seeds: List[int] = Field(default_factory=lambda: list(range(20)))
    restarts: int = Field(default=DEFAULT_RESTARTS, ge=1)
    exact_up_to: int = Field(default=10, ge=0)
    include_continuum: bool = False


class MonotonicityBlock(StrictModel):
    n_samples: int = Field(default=1000, ge=1)
    seed: int = 0


class OutputBlock(StrictModel):
    directory: Optional[str] = None
    formats: List[Literal["csv", "json", "excel"]] = Field(default_factory=lambda: ["csv", "json"])


class ExperimentConfig(StrictModel):
    model: Optional[ModelBlock] = None
    solver: SolverBlock = Field(default_factory=SolverBlock)
    simulation: SimulationBlock = Field(default_factory=SimulationBlock)
    graphon: GraphonBlock = Field(default_factory=GraphonBlock)
    monotonicity: MonotonicityBlock = Field(default_factory=MonotonicityBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    def require_model(self) -> ModelBlock:
        if self.model is None:
            raise ConfigError("this workflow needs a `model` block")
        return self.model


# ---------- loading ----------
def _line_of(text: str, loc: tuple) -> int:
    """Best-effort line number of a validation location: follow its keys through the raw text."""
    pos = 0
    for key in loc:
        if not isinstance(key, str):
            continue
        match = re.compile(rf'"{re.escape(key)}"\s*:').search(text, pos)
        if match is None:
            break
        pos = match.start()
    return text.count("\n", 0, pos) + 1


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from e
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        messages = []
        for err in e.errors():
            where = ".".join(str(part) for part in err["loc"]) or "<root>"
            messages.append(f"{source}:{_line_of(text, err['loc'])}: {where}: {err['msg']}")
        raise ConfigError("\n".join(messages)) from e


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path).expanduser()
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def normalized(config: ExperimentConfig) -> Dict[str, Any]:
    """The fully defaulted document; parsing it again gives the same document."""
    return config.model_dump(mode="json")


def dump_normalized(config: ExperimentConfig) -> str:
    return json.dumps(normalized(config), indent=2, sort_keys=False)


def config_schema() -> Dict[str, Any]:
    return ExperimentConfig.model_json_schema()


def apply_seed_override(config: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    """Replace every seed in the document; graphon seeds become seed, seed + 1, ..."""
    if seed is None:
        return config
    return config.model_copy(
        update={
            "solver": config.solver.model_copy(update={"seed": seed}),
            "simulation": config.simulation.model_copy(update={"seed": seed}),
            "graphon": config.graphon.model_copy(
                update={"seeds": [seed + i for i in range(len(config.graphon.seeds))]}
            ),
            "monotonicity": config.monotonicity.model_copy(update={"seed": seed}),
        }
    )


# ---------- builders ----------
def build_atlas(block: AtlasBlock) -> PositionAtlas:
    if block.kind == "explicit":
        return PositionAtlas(cells=block.cells, weights=block.weights)
    return uniform_atlas(block.n_cells, block.placement)


def build_kernel(block: KernelBlock) -> Kernel:
    params = {k: v for k, v in block.model_dump().items() if k != "name" and v is not None}
    return make_kernel(block.name, **params)


def build_cost(block: CostBlock, d: int) -> CostModel:
    theta = ConstantTheta(block.theta.value) if block.theta.kind == "constant" else AffineTheta(
        block.theta.intercept, block.theta.slope
    )
    base = block.potential.base if block.potential.base is not None else [0.0] * d
    if len(base) != d or (block.potential.slope is not None and len(block.potential.slope) != d):
        raise ConfigError(f"cost potential needs {d} entries per state")
    potential = Potential(
        tuple(float(v) for v in base),
        None if block.potential.slope is None else tuple(float(v) for v in block.potential.slope),
    )
    if block.kind == "quadratic":
        return QuadraticCost(d, theta, potential)
    cost = QuarticCost(d, block.kappa, theta, potential)
    check_gradient(cost)
    return cost


def build_interaction(block: InteractionBlock, d: int) -> InteractionSpec:
    if block.kind == "zero":
        return ZeroInteraction()
    if block.kind == "two_body":
        return TwoBodyInteraction(build_kernel(block.kernel), np.asarray(block.f, dtype=float))
    if block.kind == "local":
        return LocalInteraction(np.asarray(block.f, dtype=float))
    f_block = block.f_low_res
    if f_block.kind == "linear":
        if f_block.matrix is None:
            raise ConfigError("a linear f_low_res needs a matrix")
        f = LinearLowRes(np.asarray(f_block.matrix, dtype=float))
    else:
        f = PowerLowRes(f_block.exponent, f_block.scale)
    return LowResInteraction(build_kernel(block.kernel), f, build_kernel(block.smoothing))


def build_m0(m0: Any, atlas: PositionAtlas, d: int) -> np.ndarray:
    values = np.asarray(m0, dtype=float)
    if values.ndim == 1:
        values = np.broadcast_to(values, (atlas.size, values.size))
    if values.shape != (atlas.size, d):
        raise ConfigError(f"m0 must have {d} entries (or one row of {d} per cell), got shape {values.shape}")
    return np.array(values)


def build_model(block: ModelBlock) -> MfgModel:
    atlas = build_atlas(block.atlas)
    d = StateSpace(block.states).d
    return MfgModel(
        cost=build_cost(block.cost, d),
        F=build_interaction(block.F, d),
        G=build_interaction(block.G, d),
        m0=build_m0(block.m0, atlas, d),
        grid=TimeGrid(block.horizon, block.n_steps),
        atlas=atlas,
    )


def build_solver_config(block: SolverBlock) -> SolverConfig:
    return SolverConfig(**block.model_dump())


def build_layout(block: SimulationBlock, n_players: int) -> PlayerLayout:
    if block.positions == "grid":
        return grid_layout(n_players)
    return random_layout(n_players, block.seed)


def model_to_config(model: MfgModel) -> Dict[str, Any]:
    """Model block for a model built from registry pieces (round-trips through build_model)."""
    cost = model.cost.to_config()
    payload: Dict[str, Any] = {
        "states": model.d,
        "horizon": model.grid.horizon,
        "n_steps": model.grid.n_steps,
        "atlas": {"kind": "explicit", **model.atlas.to_dict()},
        "cost": cost,
        "F": model.F.to_config(),
        "G": model.G.to_config(),
        "m0": model.m0.tolist(),
    }
    return ModelBlock.model_validate(payload).model_dump(mode="json")
