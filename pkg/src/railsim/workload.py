"""GPU- and domain-level traffic matrices for all-to-all rounds.

Volumes are integer bytes. Whenever a volume is divided the parts are
rounded down and the remainder goes to the lexicographically first
destination, so every generator conserves bytes exactly.

Skew is applied per domain. Inside a domain, the skewed side of the traffic
(the source side for ``sender_skewed``, the destination side for
``receiver_skewed``) is carried by ``hot_gpus`` seeded GPUs, which models a
hot expert concentrating a domain's tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FAMILIES = ("uniform", "sparse_topk", "sender_skewed", "receiver_skewed", "trace")
MIXTRAL_PHASES = ("Start", "Early", "Mid", "Stable")
MIXTRAL_VOLUMES = (100_000_000, 152_000_000, 204_000_000, 256_000_000)

_FAMILY_TAG = {name: i for i, name in enumerate(FAMILIES)}


class WorkloadError(ValueError):
    pass


class TraceError(WorkloadError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class GpuTrafficMatrix:
    """``entries[d, n, f, m]`` is the byte count from GPU (d, n) to GPU (f, m)."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 4 or e.shape[0] != e.shape[2] or e.shape[1] != e.shape[3]:
            raise WorkloadError(f"expected shape (M, N, M, N), got {e.shape}")
        if not np.issubdtype(e.dtype, np.integer):
            raise WorkloadError("traffic volumes must be integers")
        if (e < 0).any():
            raise WorkloadError("traffic volumes must be non-negative")
        object.__setattr__(self, "entries", e.astype(np.int64, copy=False))

    @classmethod
    def zeros(cls, M: int, N: int) -> "GpuTrafficMatrix":
        return cls(np.zeros((M, N, M, N), dtype=np.int64))

    @property
    def M(self) -> int:
        return self.entries.shape[0]

    @property
    def N(self) -> int:
        return self.entries.shape[1]

    def inter_domain(self) -> np.ndarray:
        """Copy of the entries with same-domain traffic zeroed."""
        e = self.entries.copy()
        for d in range(self.M):
            e[d, :, d, :] = 0
        return e

    def sender_totals(self) -> np.ndarray:
        """Per-GPU row sums, shape (M, N), intra-domain traffic included."""
        return self.entries.sum(axis=(2, 3))

    def transpose(self) -> "GpuTrafficMatrix":
        """Traffic of the returning all-to-all (every volume flows back)."""
        return GpuTrafficMatrix(self.entries.transpose(2, 3, 0, 1).copy())


@dataclass(frozen=True)
class DomainTrafficMatrix:
    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise WorkloadError(f"expected a square matrix, got {e.shape}")
        if (e < 0).any():
            raise WorkloadError("traffic volumes must be non-negative")
        if np.diagonal(e).any():
            raise WorkloadError("domain matrix diagonal must be zero")
        object.__setattr__(self, "entries", e)

    @property
    def M(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class WorkloadSpec:
    family: str
    total_bytes_per_sender: int = 16_000_000
    K: int = 2
    sparsity: float = 0.0
    zipf_exponent: float = 1.2
    seed: int = 0
    hot_gpus: int = 1
    trace_path: Optional[str] = None
    trace_mode: Optional[str] = None
    gating_concentration: float = 4.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise WorkloadError(f"unknown workload family {self.family!r}")
        if not 0 <= self.sparsity < 1:
            raise WorkloadError("sparsity must lie in [0, 1)")
        if self.K < 1:
            raise WorkloadError("K must be >= 1")
        if not self.zipf_exponent > 0:
            raise WorkloadError("zipf_exponent must be > 0")
        if not self.total_bytes_per_sender > 0:
            raise WorkloadError("total_bytes_per_sender must be > 0")
        if self.hot_gpus < 1:
            raise WorkloadError("hot_gpus must be >= 1")
        if self.family == "trace" and not (self.trace_path or self.trace_mode):
            raise WorkloadError("trace workloads need trace_path or trace_mode")
        if self.trace_mode not in (None, "dense", "sparse"):
            raise WorkloadError(f"unknown trace_mode {self.trace_mode!r}")


def split_even(total: int, parts: int) -> list[int]:
    """Split ``total`` into ``parts`` integers; the first one absorbs the remainder."""
    q, r = divmod(int(total), parts)
    out = [q] * parts
    out[0] += r
    return out


def zipf_weights(exponent: float, n: int) -> np.ndarray:
    if not exponent > 0:
        raise WorkloadError("zipf exponent must be > 0")
    if n < 1:
        raise WorkloadError("need at least one rank")
    raw = [r ** -exponent for r in range(1, n + 1)]
    total = math.fsum(raw)
    return np.array([x / total for x in raw])


def aggregate(d1: GpuTrafficMatrix) -> DomainTrafficMatrix:
    d2 = d1.entries.sum(axis=(1, 3))
    np.fill_diagonal(d2, 0)
    return DomainTrafficMatrix(d2)


def _rng(spec: WorkloadSpec) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, _FAMILY_TAG[spec.family]]))


def _spread(entries: np.ndarray, d: int, g: int, volume: int, N: int) -> None:
    """GPU (d, g) sends ``volume`` evenly to every GPU of every other domain."""
    M = entries.shape[0]
    others = [f for f in range(M) if f != d]
    for f, v in zip(others, split_even(volume, len(others))):
        entries[d, g, f, :] += split_even(v, N)


def _hot_gpus(rng: np.random.Generator, M: int, N: int, count: int) -> list[list[int]]:
    if count > N:
        raise WorkloadError(f"hot_gpus={count} exceeds GPUs per domain N={N}")
    return [sorted(int(x) for x in rng.choice(N, size=count, replace=False)) for _ in range(M)]


def _check_dims(M: int, N: int) -> None:
    if M < 2:
        raise WorkloadError("all-to-all traffic needs M >= 2 domains")
    if N < 1:
        raise WorkloadError("need N >= 1")


def gen_uniform(spec: WorkloadSpec, M: int, N: int) -> GpuTrafficMatrix:
    _check_dims(M, N)
    e = np.zeros((M, N, M, N), dtype=np.int64)
    for d in range(M):
        for g in range(N):
            _spread(e, d, g, spec.total_bytes_per_sender, N)
    return GpuTrafficMatrix(e)


def sparse_zeroed_count(sparsity: float, M: int) -> int:
    return int(math.floor(sparsity * M + 1e-9))


def gen_sparse_topk(spec: WorkloadSpec, M: int, N: int) -> GpuTrafficMatrix:
    """Top-K expert selection over the active destination domains.

    ``floor(sparsity * M)`` destination domains are idle. Each sender GPU
    picks K active domains other than its own, splits its volume equally
    over them, and within each picked domain targets one expert GPU.
    """
    _check_dims(M, N)
    rng = _rng(spec)
    zeroed = set(int(x) for x in rng.choice(M, size=sparse_zeroed_count(spec.sparsity, M), replace=False))
    active = [f for f in range(M) if f not in zeroed]
    if len(active) < spec.K:
        raise WorkloadError(f"{len(active)} active destination domains < K={spec.K}")
    e = np.zeros((M, N, M, N), dtype=np.int64)
    for d in range(M):
        candidates = [f for f in active if f != d]
        if len(candidates) < spec.K:
            raise WorkloadError(
                f"domain {d} sees {len(candidates)} active destinations other than itself < K={spec.K}"
            )
        for g in range(N):
            chosen = sorted(int(x) for x in rng.choice(candidates, size=spec.K, replace=False))
            for f, v in zip(chosen, split_even(spec.total_bytes_per_sender, spec.K)):
                e[d, g, f, int(rng.integers(N))] += v
    return GpuTrafficMatrix(e)


def gen_sender_skewed(spec: WorkloadSpec, M: int, N: int) -> GpuTrafficMatrix:
    """Sender domains carry Zipf shares of ``M * N * total_bytes_per_sender``."""
    _check_dims(M, N)
    rng = _rng(spec)
    w = zipf_weights(spec.zipf_exponent, M)
    rank = rng.permutation(M)
    hot = _hot_gpus(rng, M, N, spec.hot_gpus)
    aggregate_volume = M * N * spec.total_bytes_per_sender
    vols = [int(math.floor(aggregate_volume * w[rank[d]])) for d in range(M)]
    vols[0] += aggregate_volume - sum(vols)
    e = np.zeros((M, N, M, N), dtype=np.int64)
    for d in range(M):
        for g, v in zip(hot[d], split_even(vols[d], len(hot[d]))):
            _spread(e, d, g, v, N)
    return GpuTrafficMatrix(e)


def gen_receiver_skewed(spec: WorkloadSpec, M: int, N: int) -> GpuTrafficMatrix:
    """Every sender GPU spreads its volume over destination domains by Zipf share.

    The share a sender would direct at its own domain stays intra-domain.
    """
    _check_dims(M, N)
    rng = _rng(spec)
    w = zipf_weights(spec.zipf_exponent, M)
    rank = rng.permutation(M)
    hot = _hot_gpus(rng, M, N, spec.hot_gpus)
    total = spec.total_bytes_per_sender
    amounts = [int(math.floor(total * w[rank[f]])) for f in range(M)]
    amounts[0] += total - sum(amounts)
    e = np.zeros((M, N, M, N), dtype=np.int64)
    for d in range(M):
        for g in range(N):
            for f in range(M):
                for m, v in zip(hot[f], split_even(amounts[f], len(hot[f]))):
                    e[d, g, f, m] += v
    return GpuTrafficMatrix(e)


def synthetic_mixtral_trace(
    M: int,
    N: int,
    mode: str = "dense",
    seed: int = 0,
    volumes: Sequence[int] = MIXTRAL_VOLUMES,
    phases: Sequence[str] = MIXTRAL_PHASES,
    gating_concentration: float = 4.0,
) -> list[tuple[str, GpuTrafficMatrix]]:
    """Phase-scaled expert traffic, one expert per domain.

    Every expert sends ``volumes[p]`` bytes in phase ``p``; its split across
    destination experts is a seeded Dirichlet draw per phase. ``dense`` spreads
    each expert's data over all of its GPUs on both ends; ``sparse`` keeps it
    on one seeded GPU per expert.
    """
    _check_dims(M, N)
    if mode not in ("dense", "sparse"):
        raise WorkloadError(f"unknown trace mode {mode!r}")
    if len(volumes) != len(phases):
        raise WorkloadError("one volume per phase required")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4D58]))
    home = [int(x) for x in rng.integers(N, size=M)]
    out = []
    for phase, volume in zip(phases, volumes):
        e = np.zeros((M, N, M, N), dtype=np.int64)
        for d in range(M):
            others = [f for f in range(M) if f != d]
            gate = rng.dirichlet(np.full(len(others), gating_concentration))
            amounts = [int(math.floor(volume * x)) for x in gate]
            amounts[0] += int(volume) - sum(amounts)
            for f, v in zip(others, amounts):
                if mode == "dense":
                    for g, vg in enumerate(split_even(v, N)):
                        e[d, g, f, :] += split_even(vg, N)
                else:
                    e[d, home[d], f, home[f]] += v
        out.append((phase, GpuTrafficMatrix(e)))
    return out


def write_trace(path, phases: Sequence[tuple[str, GpuTrafficMatrix]]) -> None:
    """Write phases as newline-delimited JSON: a header, then one record per nonzero entry."""
    if not phases:
        raise TraceError("no phases to write")
    M, N = phases[0][1].M, phases[0][1].N
    lines = [json.dumps({"M": M, "N": N, "phases": [p for p, _ in phases]})]
    for label, mat in phases:
        for d, n, f, m in zip(*np.nonzero(mat.entries)):
            lines.append(json.dumps({
                "phase": label, "src_domain": int(d), "src_gpu": int(n),
                "dst_domain": int(f), "dst_gpu": int(m), "bytes": int(mat.entries[d, n, f, m]),
            }))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_RECORD_FIELDS = ("phase", "src_domain", "src_gpu", "dst_domain", "dst_gpu", "bytes")


def load_trace(path) -> list[tuple[str, GpuTrafficMatrix]]:
    text = Path(path).read_text(encoding="utf-8")
    rows = [(i, line) for i, line in enumerate(text.splitlines(), start=1) if line.strip()]
    if not rows:
        raise TraceError("empty trace file")

    def parse(lineno, line):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(obj, dict):
            raise TraceError("record must be an object", lineno)
        return obj

    lineno, line = rows[0]
    header = parse(lineno, line)
    for key in ("M", "N", "phases"):
        if key not in header:
            raise TraceError(f"header missing {key!r}", lineno)
    M, N, labels = header["M"], header["N"], header["phases"]
    if not (isinstance(M, int) and isinstance(N, int) and M >= 2 and N >= 1):
        raise TraceError("header needs integer M >= 2 and N >= 1", lineno)
    if not labels or not all(isinstance(p, str) for p in labels) or len(set(labels)) != len(labels):
        raise TraceError("header phases must be distinct strings", lineno)
    mats = {p: np.zeros((M, N, M, N), dtype=np.int64) for p in labels}
    for lineno, line in rows[1:]:
        rec = parse(lineno, line)
        missing = [k for k in _RECORD_FIELDS if k not in rec]
        if missing:
            raise TraceError(f"record missing {missing}", lineno)
        if rec["phase"] not in mats:
            raise TraceError(f"unknown phase {rec['phase']!r}", lineno)
        idx = []
        for key, bound in (("src_domain", M), ("src_gpu", N), ("dst_domain", M), ("dst_gpu", N)):
            v = rec[key]
            if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v < bound:
                raise TraceError(f"{key}={v!r} outside [0, {bound})", lineno)
            idx.append(v)
        b = rec["bytes"]
        if not isinstance(b, int) or isinstance(b, bool):
            raise TraceError(f"bytes must be an integer, got {b!r}", lineno)
        if b < 0:
            raise TraceError(f"negative volume {b}", lineno)
        mats[rec["phase"]][tuple(idx)] += b
    return [(p, GpuTrafficMatrix(mats[p])) for p in labels]


def generate(spec: WorkloadSpec, M: int, N: int, base_dir=None) -> list[tuple[str, GpuTrafficMatrix]]:
    """Phases of a workload; synthetic families yield a single unlabeled phase."""
    if spec.family == "uniform":
        return [("", gen_uniform(spec, M, N))]
    if spec.family == "sparse_topk":
        return [("", gen_sparse_topk(spec, M, N))]
    if spec.family == "sender_skewed":
        return [("", gen_sender_skewed(spec, M, N))]
    if spec.family == "receiver_skewed":
        return [("", gen_receiver_skewed(spec, M, N))]
    if spec.trace_path:
        path = Path(spec.trace_path)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        phases = load_trace(path)
        m0 = phases[0][1]
        if (m0.M, m0.N) != (M, N):
            raise WorkloadError(f"trace is {m0.M}x{m0.N} but topology is {M}x{N}")
        return phases
    return synthetic_mixtral_trace(
        M, N, spec.trace_mode, seed=spec.seed, gating_concentration=spec.gating_concentration
    )
