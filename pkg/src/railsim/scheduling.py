"""Chunking, rail assignment and policy descriptors.

The rail scheduler is Longest-Processing-Time-first: a sending domain collects
every atomic flow of the round, sorts them by descending size and places each
one on the rail with the smallest cumulative byte count.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from .workload import GpuTrafficMatrix

DEFAULT_CHUNK_BYTES = 32 * 1024
DEFAULT_QPS_PER_RAIL = 64

POLICY_KINDS = ("rails_lpt", "ecmp", "minrtt", "plb", "reps", "uniform_oracle")
CHUNKED_POLICIES = frozenset({"rails_lpt", "minrtt", "uniform_oracle"})


class SchedulingError(ValueError):
    pass


@dataclass(frozen=True)
class AtomicFlow:
    """An indivisible transfer. ``message`` links a chunk back to its message."""

    id: int
    src: tuple[int, int]
    dst: tuple[int, int]
    bytes: int
    message: int = -1

    def __post_init__(self):
        if self.bytes < 1:
            raise SchedulingError(f"flow {self.id} has non-positive size {self.bytes}")

    @property
    def inter_domain(self) -> bool:
        return self.src[0] != self.dst[0]


@dataclass
class LoadState:
    """Cumulative bytes assigned to each rail in the current round."""

    loads: list[int]

    @classmethod
    def zeros(cls, N: int) -> "LoadState":
        return cls([0] * N)

    def reset(self) -> None:
        self.loads = [0] * len(self.loads)

    def __len__(self) -> int:
        return len(self.loads)

    @property
    def total(self) -> int:
        return sum(self.loads)

    def mse(self) -> float:
        mu = Fraction(self.total, len(self.loads))
        return float(sum((Fraction(x) - mu) ** 2 for x in self.loads) / len(self.loads))


@dataclass
class Assignment:
    rail: dict[int, int] = field(default_factory=dict)
    qp: dict[int, int] = field(default_factory=dict)
    order: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.order)


def split_message(
    src: tuple[int, int],
    dst: tuple[int, int],
    message_bytes: int,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
    first_id: int = 0,
    message: int = -1,
) -> list[AtomicFlow]:
    if message_bytes < 1:
        raise SchedulingError("cannot split an empty message")
    if chunk_bytes < 1:
        raise SchedulingError("chunk_bytes must be >= 1")
    full, rest = divmod(message_bytes, chunk_bytes)
    sizes = [chunk_bytes] * full + ([rest] if rest else [])
    return [
        AtomicFlow(first_id + i, tuple(src), tuple(dst), s, message)
        for i, s in enumerate(sizes)
    ]


def lpt_order(flows: Iterable[AtomicFlow]) -> list[AtomicFlow]:
    """Descending size; equal sizes ordered by source GPU, then flow id."""
    return sorted(flows, key=lambda fl: (-fl.bytes, fl.src, fl.id))


def lpt_schedule(flows: Sequence[AtomicFlow], N: int) -> tuple[Assignment, LoadState]:
    """Assign each flow to the currently least-loaded rail, largest flows first.

    Load ties go to the lowest rail index. The load state starts at zero, so
    every call is one independent round.
    """
    if N < 1:
        raise SchedulingError("need at least one rail")
    state = LoadState.zeros(N)
    assignment = Assignment()
    heap = [(0, j) for j in range(N)]
    for fl in lpt_order(flows):
        load, j = heapq.heappop(heap)
        assignment.rail[fl.id] = j
        assignment.order.append(fl.id)
        state.loads[j] = load + fl.bytes
        heapq.heappush(heap, (state.loads[j], j))
    return assignment, state


def qp_map(assignment: Assignment, qps_per_rail: int = DEFAULT_QPS_PER_RAIL) -> Assignment:
    """Round-robin queue pairs per rail, in assignment order."""
    if qps_per_rail < 1:
        raise SchedulingError("qps_per_rail must be >= 1")
    cursor: dict[int, int] = {}
    qp = {}
    for fid in assignment.order:
        j = assignment.rail[fid]
        c = cursor.get(j, 0)
        qp[fid] = c % qps_per_rail
        cursor[j] = c + 1
    return replace(assignment, qp=qp)


@dataclass(frozen=True)
class AllocationMatrix:
    """``P[k, f, n]``: share of domain k's traffic to domain f carried on rail n.

    Entries may be floats or exact ``Fraction`` objects.
    """

    P: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P)
        if P.ndim != 3 or P.shape[0] != P.shape[1]:
            raise SchedulingError(f"allocation must have shape (M, M, N), got {P.shape}")
        if (P < 0).any():
            raise SchedulingError("allocation shares must be non-negative")
        sums = P.sum(axis=2)
        if P.dtype == object:
            bad = any(s != 1 for s in sums.ravel())
        else:
            bad = bool((np.abs(sums - 1.0) > 1e-12).any())
        if bad:
            raise SchedulingError("allocation shares must sum to 1 over rails")
        object.__setattr__(self, "P", P)

    @property
    def M(self) -> int:
        return self.P.shape[0]

    @property
    def N(self) -> int:
        return self.P.shape[2]

    def as_float(self) -> np.ndarray:
        return self.P.astype(float)


def uniform_allocation(M: int, N: int) -> AllocationMatrix:
    if N < 1:
        raise SchedulingError("need at least one rail")
    P = np.empty((M, M, N), dtype=object)
    P.fill(Fraction(1, N))
    return AllocationMatrix(P)


_POLICY_KNOBS = {
    "rails_lpt": set(),
    "uniform_oracle": set(),
    "ecmp": set(),
    "reps": set(),
    "plb": {"repath_threshold"},
    "minrtt": {"probe_quantum"},
}


@dataclass(frozen=True)
class PolicyDescriptor:
    """What the simulator needs to route one policy.

    ``repath_threshold``: a PLB flow re-hashes when its rate falls below this
    fraction of its endpoint fair share. ``probe_quantum``: MinRTT backlog
    estimates are rounded down to multiples of this many bytes.
    """

    kind: str
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    qps_per_rail: int = DEFAULT_QPS_PER_RAIL
    seed: int = 0
    repath_threshold: float = 0.5
    probe_quantum: int = 1

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise SchedulingError(f"unknown policy kind {self.kind!r}")
        if self.chunk_bytes < 1:
            raise SchedulingError("chunk_bytes must be >= 1")
        if self.qps_per_rail < 1:
            raise SchedulingError("qps_per_rail must be >= 1")
        if not 0 < self.repath_threshold <= 1:
            raise SchedulingError("repath_threshold must lie in (0, 1]")
        if self.probe_quantum < 1:
            raise SchedulingError("probe_quantum must be >= 1")

    @property
    def chunked(self) -> bool:
        return self.kind in CHUNKED_POLICIES


def make_policy(kind: str, **params) -> PolicyDescriptor:
    if kind not in POLICY_KINDS:
        raise SchedulingError(f"unknown policy kind {kind!r}")
    common = {"chunk_bytes", "qps_per_rail", "seed"}
    unknown = set(params) - common - _POLICY_KNOBS[kind]
    if unknown:
        raise SchedulingError(f"policy {kind!r} does not accept {sorted(unknown)}")
    return PolicyDescriptor(kind=kind, **params)


def messages(d1: GpuTrafficMatrix) -> list[AtomicFlow]:
    """One flow per nonzero inter-domain GPU pair, in lexicographic order."""
    e = d1.inter_domain()
    out = []
    for i, (d, n, f, m) in enumerate(zip(*np.nonzero(e))):
        out.append(AtomicFlow(i, (int(d), int(n)), (int(f), int(m)), int(e[d, n, f, m]), i))
    return out


def schedule_domain(
    flows: Sequence[AtomicFlow], N: int, qps_per_rail: int = DEFAULT_QPS_PER_RAIL
) -> tuple[Assignment, LoadState]:
    """One round for one sending domain: LPT placement followed by QP mapping."""
    assignment, state = lpt_schedule(flows, N)
    return qp_map(assignment, qps_per_rail), state


def chunk_all(msgs: Sequence[AtomicFlow], chunk_bytes: int) -> list[AtomicFlow]:
    out: list[AtomicFlow] = []
    for msg in msgs:
        out.extend(split_message(msg.src, msg.dst, msg.bytes, chunk_bytes, len(out), msg.message))
    return out


def rail_assignment(
    msgs: Sequence[AtomicFlow], N: int, chunk_bytes: int, qps_per_rail: int,
    M: Optional[int] = None,
) -> tuple[list[AtomicFlow], Assignment, list[LoadState]]:
    """Chunk every message and run one independent LPT round per sending domain."""
    chunks = chunk_all(msgs, chunk_bytes)
    if M is None:
        M = 1 + max((c.src[0] for c in chunks), default=-1)
    by_domain: dict[int, list[AtomicFlow]] = {}
    for c in chunks:
        by_domain.setdefault(c.src[0], []).append(c)
    merged = Assignment()
    states = []
    for d in range(M):
        a, s = schedule_domain(by_domain.get(d, []), N, qps_per_rail)
        merged.rail.update(a.rail)
        merged.qp.update(a.qp)
        merged.order.extend(a.order)
        states.append(s)
    return chunks, merged, states
