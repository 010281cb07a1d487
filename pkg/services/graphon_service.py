from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd

from config import DEFAULT_RESTARTS, EXACT_NORM_MAX_N
from services.interactions_service import Kernel, KernelFn
from utils import streams
from utils.errors import ConfigError, NormBudgetError

logger = logging.getLogger(__name__)

ALTERNATION_MAX = 100
FLIP_MAX = 1000
CONTINUUM_FACTOR = 4


@dataclass(frozen=True)
class KernelMatrix:
    """Step kernel constant on ((i-1)/n, i/n] x ((j-1)/n, j/n]."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1] or entries.shape[0] < 1:
            raise ConfigError(f"kernel matrix must be square and non-empty, got {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise ConfigError("kernel matrix has non-finite entries")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def n(self) -> int:
        return int(self.entries.shape[0])

    def __sub__(self, other: "KernelMatrix") -> "KernelMatrix":
        if self.n != other.n:
            raise ConfigError(f"cannot subtract kernel matrices of size {self.n} and {other.n}")
        return KernelMatrix(self.entries - other.entries)

    def __neg__(self) -> "KernelMatrix":
        return KernelMatrix(-self.entries)

    def upsample(self, factor: int) -> "KernelMatrix":
        """Same step kernel written on a grid `factor` times finer."""
        return KernelMatrix(np.kron(self.entries, np.ones((factor, factor))))

    def to_frame(self) -> pd.DataFrame:
        n = self.n
        return pd.DataFrame(self.entries, index=pd.RangeIndex(1, n + 1, name="i"), columns=[str(j) for j in range(1, n + 1)])


@dataclass(frozen=True)
class NormEstimate:
    value: float
    method: Literal["exact", "heuristic", "heuristic-continuum"]
    witnesses: Dict[str, List[int]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"value": self.value, "method": self.method, "witnesses": dict(self.witnesses)}


def _as_fn(K: KernelFn | Kernel) -> KernelFn:
    return K if isinstance(K, Kernel) else (lambda u, v: np.asarray(K(u, v), dtype=float))


def _grid(n: int) -> np.ndarray:
    return np.arange(1, n + 1, dtype=float) / n


def discretize_kernel(K: KernelFn | Kernel, n: int) -> KernelMatrix:
    """W[i][j] = K(i/n, j/n)."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    u = _grid(n)
    values = np.broadcast_to(_as_fn(K)(u[:, None], u[None, :]), (n, n))
    return KernelMatrix(values)


def sample_bernoulli_graph(K: KernelFn | Kernel, n: int, seed: int) -> KernelMatrix:
    """Independent Bernoulli(K(i/n, j/n)) entries, one stream per (seed, n)."""
    p = discretize_kernel(K, n).entries
    if np.any(p < 0) or np.any(p > 1):
        raise ConfigError(f"kernel values must lie in [0, 1] to sample a graph (range [{p.min():.3g}, {p.max():.3g}])")
    rng = streams.stream(seed, streams.SAMPLING, n)
    return KernelMatrix((rng.random((n, n)) < p).astype(float))


def step_kernel(W: KernelMatrix) -> Kernel:
    """The step-function extension of W as a kernel on [0,1]^2."""
    entries = W.entries
    n = W.n

    def fn(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        i = np.clip(np.ceil(np.asarray(u) * n - 1e-9).astype(np.int64) - 1, 0, n - 1)
        j = np.clip(np.ceil(np.asarray(v) * n - 1e-9).astype(np.int64) - 1, 0, n - 1)
        return entries[i, j]

    return Kernel("step", fn, (("n", float(n)),), float(np.max(np.abs(entries))))


# ---------- exact norms ----------
def _check_budget(D: KernelMatrix) -> None:
    if D.n > EXACT_NORM_MAX_N:
        raise NormBudgetError(
            f"exact enumeration is limited to n <= {EXACT_NORM_MAX_N} (got n={D.n}); use the heuristic estimator"
        )


def _indicator_rows(n: int) -> np.ndarray:
    """Row s is the 0/1 indicator of the subset encoded by bitmask s."""
    return ((np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1).astype(float)


def _members(mask: np.ndarray) -> List[int]:
    return np.flatnonzero(mask).tolist()


def cut_norm_exact(D: KernelMatrix) -> NormEstimate:
    """
    max over S, T of |sum_{S x T} D| / n^2.

    For fixed S the best T takes all positive (or all negative) column sums,
    so only the 2^n row subsets are enumerated.
    """
    _check_budget(D)
    rows = _indicator_rows(D.n)
    col_sums = rows @ D.entries
    pos = np.clip(col_sums, 0.0, None).sum(axis=1)
    neg = -np.clip(col_sums, None, 0.0).sum(axis=1)
    best = np.maximum(pos, neg)
    s = int(np.argmax(best))
    sign = 1.0 if pos[s] >= neg[s] else -1.0
    t_mask = sign * col_sums[s] > 0
    return NormEstimate(
        float(best[s]) / D.n**2,
        "exact",
        {"S": _members(rows[s]), "T": _members(t_mask)},
    )


def _infty_to_one_exact(D: KernelMatrix) -> NormEstimate:
    _check_budget(D)
    signs = 2.0 * _indicator_rows(D.n) - 1.0
    products = signs @ D.entries
    totals = np.abs(products).sum(axis=1)
    s = int(np.argmax(totals))
    t = np.where(products[s] >= 0, 1, -1)
    return NormEstimate(
        float(totals[s]) / D.n**2,
        "exact",
        {"s": signs[s].astype(int).tolist(), "t": t.tolist()},
    )


# ---------- alternating heuristics ----------
def _cut_values(col_sums: np.ndarray) -> np.ndarray:
    """Best |sum_{S x T} D| over T for row sets whose column sums are col_sums (last axis)."""
    pos = np.clip(col_sums, 0.0, None).sum(axis=-1)
    neg = -np.clip(col_sums, None, 0.0).sum(axis=-1)
    return np.maximum(pos, neg)


def _alternate_cut(D: np.ndarray, t: np.ndarray, sign: float) -> np.ndarray:
    """Block-coordinate ascent on sign * sum_{S x T} D from a starting column set; returns S."""
    s = np.zeros(D.shape[0], dtype=bool)
    for _ in range(ALTERNATION_MAX):
        new_s = sign * D[:, t].sum(axis=1) > 0
        new_t = sign * D[new_s, :].sum(axis=0) > 0
        if np.array_equal(new_s, s) and np.array_equal(new_t, t):
            break
        s, t = new_s, new_t
    return s


def _flip_rows(D: np.ndarray, s: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Single-row flips of S (with the best T for every S) until none improves."""
    s = s.copy()
    col_sums = D[s].sum(axis=0)
    value = float(_cut_values(col_sums))
    for _ in range(FLIP_MAX):
        direction = np.where(s, -1.0, 1.0)
        candidates = col_sums[None, :] + direction[:, None] * D
        values = _cut_values(candidates)
        i = int(np.argmax(values))
        if values[i] <= value + 1e-12:
            break
        s[i] = not s[i]
        col_sums = candidates[i]
        value = float(values[i])
    pos = np.clip(col_sums, 0.0, None).sum()
    neg = -np.clip(col_sums, None, 0.0).sum()
    t = (col_sums if pos >= neg else -col_sums) > 0
    return abs(float(D[np.ix_(s, t)].sum())), s, t


def _alternate_signs(D: np.ndarray, s: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    t = np.ones(D.shape[1])
    for _ in range(ALTERNATION_MAX):
        new_t = np.where(s @ D >= 0, 1.0, -1.0)
        new_s = np.where(D @ new_t >= 0, 1.0, -1.0)
        if np.array_equal(new_s, s) and np.array_equal(new_t, t):
            break
        s, t = new_s, new_t
    return float(s @ D @ t), s, t


def _cut_restart(D: np.ndarray, seed: int, r: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Row-flip ascent from a random row set and from both alternations of a random column set."""
    rng = streams.stream(seed, streams.RESTARTS, r)
    columns = rng.random(D.shape[1]) < 0.5
    starts = [rng.random(D.shape[0]) < 0.5]
    starts += [_alternate_cut(D, columns.copy(), sign) for sign in (1.0, -1.0)]
    if r == 0:
        greedy = np.zeros(D.shape[0], dtype=bool)
        greedy[int(np.argmax(np.abs(D.sum(axis=1))))] = True
        starts.append(greedy)
    best = (-1.0, starts[0], columns)
    for s in starts:
        candidate = _flip_rows(D, s)
        if candidate[0] > best[0]:
            best = candidate
    return best


def _sign_restart(D: np.ndarray, seed: int, r: int) -> tuple[float, np.ndarray, np.ndarray]:
    rng = streams.stream(seed, streams.RESTARTS, r)
    return _alternate_signs(D, np.where(rng.random(D.shape[0]) < 0.5, 1.0, -1.0))


def _best_of_restarts(worker, D: np.ndarray, restarts: int, seed: int, threads: int):
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(lambda r: worker(D, seed, r), range(restarts)))
    else:
        results = [worker(D, seed, r) for r in range(restarts)]
    # first maximum in restart order keeps results independent of thread count
    return max(results, key=lambda item: item[0])


def cut_norm_heuristic(D: KernelMatrix, restarts: int = DEFAULT_RESTARTS, seed: int = 0, threads: int = 1) -> NormEstimate:
    """Lower bound on the cut norm: best local maximum over `restarts` random starts."""
    value, s, t = _best_of_restarts(_cut_restart, D.entries, restarts, seed, threads)
    return NormEstimate(value / D.n**2, "heuristic", {"S": _members(s), "T": _members(t)})


def infty_to_one_norm(
    D: KernelMatrix,
    mode: Literal["exact", "heuristic"] = "exact",
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
    threads: int = 1,
) -> NormEstimate:
    """max over sign vectors s, t of s^T D t / n^2."""
    if mode == "exact":
        return _infty_to_one_exact(D)
    if mode != "heuristic":
        raise ConfigError(f"unknown mode: {mode}")
    value, s, t = _best_of_restarts(_sign_restart, D.entries, restarts, seed, threads)
    return NormEstimate(
        value / D.n**2,
        "heuristic",
        {"s": s.astype(int).tolist(), "t": t.astype(int).tolist()},
    )


# ---------- convergence studies ----------
def continuum_gap(K: KernelFn | Kernel, n: int, restarts: int = DEFAULT_RESTARTS, seed: int = 0, threads: int = 1) -> NormEstimate:
    """
    Approximate cut distance between the step kernel of K at resolution n and
    K itself, using K discretized at resolution 4n as the stand-in for K.
    """
    fine = discretize_kernel(K, CONTINUUM_FACTOR * n)
    coarse = discretize_kernel(K, n).upsample(CONTINUUM_FACTOR)
    estimate = cut_norm_heuristic(coarse - fine, restarts, seed, threads)
    return NormEstimate(estimate.value, "heuristic-continuum", estimate.witnesses)


def cut_norm_study(
    K: KernelFn | Kernel,
    sizes: Sequence[int],
    seeds: Sequence[int],
    restarts: int = DEFAULT_RESTARTS,
    exact_up_to: int = 10,
    include_continuum: bool = False,
    threads: int = 1,
) -> pd.DataFrame:
    """
    Cut norm of (Bernoulli sample - discretized kernel) for every (n, seed).

    Returns long-format rows (n, seed, method, value, seconds); the exact
    method is added for n <= exact_up_to.
    """
    rows: List[Dict[str, Any]] = []
    exact_up_to = min(exact_up_to, EXACT_NORM_MAX_N)
    for n in sizes:
        base = discretize_kernel(K, n)
        for seed in seeds:
            diff = sample_bernoulli_graph(K, n, seed) - base
            start = time.perf_counter()
            heuristic = cut_norm_heuristic(diff, restarts, seed, threads)
            rows.append(_row(n, seed, heuristic, start))
            if n <= exact_up_to:
                start = time.perf_counter()
                rows.append(_row(n, seed, cut_norm_exact(diff), start))
            if include_continuum:
                start = time.perf_counter()
                rows.append(_row(n, seed, continuum_gap(K, n, restarts, seed, threads), start))
        logger.info("cut-norm study finished n=%d over %d seeds", n, len(seeds))
    return pd.DataFrame(rows, columns=["n", "seed", "method", "value", "seconds"])


def _row(n: int, seed: int, estimate: NormEstimate, start: float) -> Dict[str, Any]:
    return {
        "n": int(n),
        "seed": int(seed),
        "method": estimate.method,
        "value": estimate.value,
        "seconds": time.perf_counter() - start,
    }
