from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from config import OUTPUTS_DIR
from services.solver_service import EquilibriumResult, MfgModel
from utils.errors import ArtifactError, GridMismatchError
from utils.fields import MeasureFlow, Policy, ValueField
from utils.grids import PositionAtlas, TimeGrid

VALUE_FILE = "value.csv"
FLOW_FILE = "flow.csv"
POLICY_FILE = "policy.csv"
SUMMARY_FILE = "summary.json"
WORKBOOK_FILE = "equilibrium.xlsx"


def resolve_output_dir(output_path: Optional[str], default_dir: Optional[str] = None) -> Path:
    """
    If output_path is:
    - None/empty -> default_dir, or config.OUTPUTS_DIR when that is None too
    - anything else -> that directory (created if needed)
    """
    if output_path is None or str(output_path).strip() == "":
        out = Path(default_dir) if default_dir else OUTPUTS_DIR
    else:
        out = Path(os.path.abspath(os.path.expanduser(str(output_path))))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def write_json(path: Path, payload: Dict[str, Any]) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False, default=_json_default)
        f.write("\n")
    return path


def read_json(path: Path) -> Dict[str, Any]:
    if not path.is_file():
        raise ArtifactError(f"missing artifact: {path}", path.name)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{path}: invalid JSON ({e.msg})", path.name) from e


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def _read_csv(path: Path, columns: Iterable[str]) -> pd.DataFrame:
    if not path.is_file():
        raise ArtifactError(f"missing artifact: {path}", path.name)
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ArtifactError(f"{path} lacks columns {missing}", path.name)
    return frame


# ---------- long-format frames (states and cells labelled from 1) ----------
def _index_columns(grid: TimeGrid, atlas: PositionAtlas, d: int) -> Dict[str, np.ndarray]:
    k, c, x = np.indices((grid.n_steps + 1, atlas.size, d))
    return {
        "time_index": k.reshape(-1),
        "time": grid.times[k.reshape(-1)],
        "cell": c.reshape(-1) + 1,
        "position": atlas.cells[c.reshape(-1)],
        "state": x.reshape(-1) + 1,
    }


def value_frame(value: ValueField, grid: TimeGrid, atlas: PositionAtlas) -> pd.DataFrame:
    columns = _index_columns(grid, atlas, value.values.shape[-1])
    columns["value"] = value.values.reshape(-1)
    return pd.DataFrame(columns)


def flow_frame(flow: MeasureFlow, grid: TimeGrid, atlas: PositionAtlas) -> pd.DataFrame:
    columns = _index_columns(grid, atlas, flow.d)
    columns["mass"] = flow.values.reshape(-1)
    return pd.DataFrame(columns)


def policy_frame(policy: Policy, grid: TimeGrid, atlas: PositionAtlas) -> pd.DataFrame:
    d = policy.d
    k, c, x, y = np.indices(policy.rates.shape)
    off = (x != y).reshape(-1)
    k, c, x, y = (a.reshape(-1)[off] for a in (k, c, x, y))
    return pd.DataFrame(
        {
            "time_index": k,
            "time": grid.times[k],
            "cell": c + 1,
            "position": atlas.cells[c],
            "from_state": x + 1,
            "to_state": y + 1,
            "rate": policy.rates.reshape(-1)[off],
        }
    )


def residual_frame(result: EquilibriumResult) -> pd.DataFrame:
    return pd.DataFrame(
        {"iteration": np.arange(1, len(result.residual_history) + 1), "residual": result.residual_history}
    )


# ---------- equilibrium artifacts ----------
def write_equilibrium(
    result: EquilibriumResult,
    model: MfgModel,
    out_dir: Path,
    formats: Iterable[str] = ("csv", "json"),
    summary_extra: Optional[Dict[str, Any]] = None,
) -> List[str]:
    """Write value/flow/policy CSVs, summary.json and optionally an Excel workbook; returns file names."""
    formats = set(formats)
    written: List[str] = []
    frames = {
        VALUE_FILE: value_frame(result.value, model.grid, model.atlas),
        FLOW_FILE: flow_frame(result.flow, model.grid, model.atlas),
        POLICY_FILE: policy_frame(result.policy, model.grid, model.atlas),
    }
    # the CSVs are what load_equilibrium reads back, so they are always written
    for name, frame in frames.items():
        write_csv(frame, out_dir / name)
        written.append(name)

    summary: Dict[str, Any] = {
        **result.summary(),
        "grid": {"horizon": model.grid.horizon, "n_steps": model.grid.n_steps},
        "atlas": model.atlas.to_dict(),
        "rate_cap": result.policy.rate_cap,
    }
    if summary_extra:
        summary.update(summary_extra)
    write_json(out_dir / SUMMARY_FILE, summary)
    written.append(SUMMARY_FILE)

    if "excel" in formats:
        with pd.ExcelWriter(out_dir / WORKBOOK_FILE, engine="openpyxl") as writer:
            frames[VALUE_FILE].to_excel(writer, sheet_name="Value", index=False)
            frames[FLOW_FILE].to_excel(writer, sheet_name="Flow", index=False)
            frames[POLICY_FILE].to_excel(writer, sheet_name="Policy", index=False)
            residual_frame(result).to_excel(writer, sheet_name="Residuals", index=False)
        written.append(WORKBOOK_FILE)
    return written


def _table(frame: pd.DataFrame, keys: List[str], column: str, shape: tuple) -> np.ndarray:
    ordered = frame.sort_values(keys, kind="stable")
    values = ordered[column].to_numpy(dtype=float)
    if values.size != int(np.prod(shape)):
        raise GridMismatchError(f"saved {column} table has {values.size} entries, expected shape {shape}")
    return values.reshape(shape)


def load_equilibrium(directory: str | Path, model: MfgModel) -> EquilibriumResult:
    """Rebuild an EquilibriumResult from the artifacts of a previous solve on the same grids."""
    directory = Path(directory).expanduser()
    summary = read_json(directory / SUMMARY_FILE)
    saved_grid = TimeGrid(**summary["grid"]) if "grid" in summary else model.grid
    model.grid.check_same(saved_grid)
    if "atlas" in summary:
        model.atlas.check_same(PositionAtlas.from_dict(summary["atlas"]))

    times, cells, d = model.grid.n_steps + 1, model.atlas.size, model.d
    state_keys = ["time_index", "cell", "state"]
    value = _read_csv(directory / VALUE_FILE, state_keys + ["value"])
    flow = _read_csv(directory / FLOW_FILE, state_keys + ["mass"])
    policy = _read_csv(directory / POLICY_FILE, ["time_index", "cell", "from_state", "to_state", "rate"])

    rates = np.zeros((times, cells, d, d))
    k = policy["time_index"].to_numpy(dtype=int)
    c = policy["cell"].to_numpy(dtype=int) - 1
    x = policy["from_state"].to_numpy(dtype=int) - 1
    y = policy["to_state"].to_numpy(dtype=int) - 1
    if k.size and (k.max() >= times or c.max() >= cells or max(x.max(), y.max()) >= d):
        raise GridMismatchError(f"{POLICY_FILE} indices exceed the model grid")
    rates[k, c, x, y] = policy["rate"].to_numpy(dtype=float)

    return EquilibriumResult(
        value=ValueField(_table(value, state_keys, "value", (times, cells, d))),
        flow=MeasureFlow(_table(flow, state_keys, "mass", (times, cells, d))),
        policy=Policy(rates, float(summary.get("rate_cap", np.inf))),
        residual_history=[float(r) for r in summary.get("residual_history", [])],
        converged=bool(summary.get("converged", False)),
        iterations=int(summary.get("iterations", 0)),
        warnings=list(summary.get("warnings", [])),
    )
