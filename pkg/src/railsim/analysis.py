"""Load matrices, closed-form completion-time bound, MSE metrics and a brute-force oracle."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .scheduling import AllocationMatrix, AtomicFlow, LoadState, lpt_schedule
from .workload import DomainTrafficMatrix

BRUTE_FORCE_LIMIT = 10**7


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class LoadMatrices:
    S: np.ndarray  # (M, N) sending bytes per domain and rail
    R: np.ndarray  # (M, N) receiving bytes per domain and rail


@dataclass(frozen=True)
class BoundReport:
    t_star_bytes: float
    t_star_seconds: Optional[float]
    achieved_mse: float
    w_max: int
    spread: int
    makespan: int
    mean_load: float
    bound_satisfied: bool
    spread_satisfied: bool
    loads: tuple[int, ...]


def _check_dims(d2: DomainTrafficMatrix, p: AllocationMatrix) -> None:
    if d2.entries.shape[0] != p.M:
        raise AnalysisError(f"traffic matrix has M={d2.entries.shape[0]}, allocation has M={p.M}")


def _weighted(d2: DomainTrafficMatrix, p: AllocationMatrix) -> np.ndarray:
    D = d2.entries
    if p.P.dtype == object:
        D = D.astype(object)  # Python ints keep Fraction products exact
    return D[:, :, None] * p.P


def sending_load_matrix(d2: DomainTrafficMatrix, p: AllocationMatrix) -> np.ndarray:
    """S[k, n] = sum over f of d2[k, f] * P[k, f, n]. Exact when P holds Fractions."""
    _check_dims(d2, p)
    return _weighted(d2, p).sum(axis=1)


def receiving_load_matrix(d2: DomainTrafficMatrix, p: AllocationMatrix) -> np.ndarray:
    """R[f, n] = sum over k of d2[k, f] * P[k, f, n]."""
    _check_dims(d2, p)
    return _weighted(d2, p).sum(axis=0)


def load_matrices(d2: DomainTrafficMatrix, p: AllocationMatrix) -> LoadMatrices:
    return LoadMatrices(sending_load_matrix(d2, p), receiving_load_matrix(d2, p))


def lp_lower_bound(d2: DomainTrafficMatrix, N: int, R2: float) -> tuple[float, float]:
    """Return (T* in seconds, bottleneck bytes per rail).

    No allocation can beat max(row sum, column sum) / N on its busiest NIC,
    and the uniform split reaches exactly that, so the min-max optimum is
    available in closed form.
    """
    if N < 1:
        raise AnalysisError("N must be >= 1")
    if R2 <= 0:
        raise AnalysisError("R2 must be positive")
    D = d2.entries
    peak = max(D.sum(axis=1).max(initial=0).item(), D.sum(axis=0).max(initial=0).item())
    bottleneck = peak / N
    return bottleneck / R2, bottleneck


def mse(loads: Sequence[float], target: Union[float, Sequence[float]]) -> float:
    L = np.asarray(loads, dtype=float)
    if L.size == 0:
        raise AnalysisError("mse of an empty vector")
    T = np.broadcast_to(np.asarray(target, dtype=float), L.shape)
    return float(np.mean((L - T) ** 2))


def normalized_mse(loads: Sequence[float]) -> float:
    """MSE of load fractions against 1/N. All-zero loads count as balanced (0)."""
    L = np.asarray(loads, dtype=float)
    if L.size == 0:
        raise AnalysisError("normalized_mse of an empty vector")
    total = L.sum()
    if total <= 0:
        return 0.0
    return mse(L / total, 1.0 / L.size)


def lpt_mse(state: LoadState) -> float:
    return mse(state.loads, sum(state.loads) / len(state.loads))


def _all_loads(w: np.ndarray, N: int) -> np.ndarray:
    """Rail loads of every assignment of ``w``. Flow 0 is the most significant base-N digit of the row."""
    loads = np.zeros((1, N), dtype=np.int64)
    for i, wi in enumerate(w):
        blocks = []
        for j in range(N):
            b = loads.copy()
            b[:, j] += wi
            blocks.append(b)
        loads = np.stack(blocks, axis=1).reshape(-1, N)
    return loads


def _digit(row: int, width: int, i: int, N: int) -> int:
    return (row // N ** (width - 1 - i)) % N


def brute_force_optimal(flows: Sequence[AtomicFlow], N: int) -> tuple[int, float, dict[int, int]]:
    """Exhaustive (min makespan, min MSE, a makespan-optimal assignment).

    The two objectives are minimized independently.
    """
    F = len(flows)
    if N < 1:
        raise AnalysisError("N must be >= 1")
    if N**F > BRUTE_FORCE_LIMIT:
        raise AnalysisError(f"{N}^{F} assignments exceed the limit of {BRUTE_FORCE_LIMIT}")
    if F == 0:
        return 0, 0.0, {}
    w = np.array([fl.bytes for fl in flows], dtype=np.int64)
    mean = w.sum() / N
    # Enumerate a head block of flows as one array and loop over the tail.
    head = 0
    while head < F and N ** (head + 1) <= 1 << 18:
        head += 1
    base = _all_loads(w[:head], N)
    best_span, best_mse, best = None, None, (0, 0)
    for tail_code in range(N ** (F - head)):
        extra = np.zeros(N, dtype=np.int64)
        c = tail_code
        for wi in w[head:]:
            extra[c % N] += wi
            c //= N
        loads = base + extra
        spans = loads.max(axis=1)
        i = int(np.argmin(spans))
        if best_span is None or spans[i] < best_span:
            best_span, best = int(spans[i]), (i, tail_code)
        m = float(((loads - mean) ** 2).mean(axis=1).min())
        if best_mse is None or m < best_mse:
            best_mse = m
    assign = {}
    row, tail_code = best
    for i, fl in enumerate(flows):
        if i < head:
            assign[fl.id] = _digit(row, head, i, N)
        else:
            assign[fl.id] = tail_code % N
            tail_code //= N
    return best_span, best_mse, assign


def lpt_bound_check(
    flows: Sequence[AtomicFlow], N: int, R2: Optional[float] = None
) -> BoundReport:
    """Run the LPT scheduler and test MSE <= w_max^2 and max - min <= w_max."""
    _, state = lpt_schedule(flows, N)
    loads = state.loads
    w_max = max((fl.bytes for fl in flows), default=0)
    total = sum(loads)
    achieved = float(sum((Fraction(x) - Fraction(total, N)) ** 2 for x in loads) / N)
    spread = max(loads) - min(loads)
    mean_load = total / N
    return BoundReport(
        t_star_bytes=mean_load,
        t_star_seconds=None if R2 is None else mean_load / R2,
        achieved_mse=achieved,
        w_max=w_max,
        spread=spread,
        makespan=max(loads),
        mean_load=mean_load,
        bound_satisfied=achieved <= w_max**2,
        spread_satisfied=spread <= w_max,
        loads=tuple(loads),
    )
