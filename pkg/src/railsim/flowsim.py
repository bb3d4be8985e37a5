"""Fluid flow-level simulator with max-min fair rate sharing.

Each simulated flow has one or more weighted routes. A flow with rate ``x``
puts ``w * x`` on every link of a route of weight ``w``. Rates come from
progressive filling and are recomputed whenever a flow completes.

Flows whose routes load the same inter-domain links with the same weights
always receive the same max-min rate, so the fill runs over those classes
instead of individual flows. Intra-domain links are left out of the fill:
every route that crosses an intra link also crosses the NIC link it feeds,
so with R1 > R2 an intra link can never be the bottleneck. Their loads are
still measured at every event and reported.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn

from .scheduling import AtomicFlow, PolicyDescriptor, chunk_all, rail_assignment
from .topology import (
    INTRA_KINDS, LinkId, LinkKind, Path, RailTopology, gpu_down, gpu_up, nic_down, nic_up,
    rail_path, spine_down, spine_path, spine_up,
)
from .workload import split_even

RESIDUAL_BYTES = 1e-6
RTOL = 1e-9


class SimulationError(RuntimeError):
    pass


@dataclass
class FlowState:
    id: int
    remaining: float
    routes: list[tuple[Path, float]]
    rate: float = 0.0

    def __post_init__(self):
        if self.remaining < 0:
            raise SimulationError(f"flow {self.id} has negative remaining bytes")
        if self.rate < 0:
            raise SimulationError(f"flow {self.id} has negative rate")
        if abs(sum(w for _, w in self.routes) - 1.0) > 1e-12:
            raise SimulationError(f"flow {self.id} share-weights do not sum to 1")


@dataclass(frozen=True)
class SimResult:
    policy: PolicyDescriptor
    seed: int
    flows: tuple[AtomicFlow, ...]
    completion: np.ndarray
    message_ids: np.ndarray
    message_completion: np.ndarray
    total_time: float
    link_bytes: np.ndarray
    send_volume: np.ndarray
    recv_volume: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return sum(fl.bytes for fl in self.flows)


# ---------------------------------------------------------------- max-min fill

@njit(cache=True)
def _fill(c_ptr, c_link, c_coef, l_ptr, l_cls, cap, counts):
    n_cls = counts.size
    n_links = cap.size
    x = np.zeros(n_cls)
    frozen = counts <= 0
    resid = cap.copy()
    denom = np.zeros(n_links)
    left = 0
    for c in range(n_cls):
        if not frozen[c]:
            left += 1
            for p in range(c_ptr[c], c_ptr[c + 1]):
                denom[c_link[p]] += counts[c] * c_coef[p]
    level = 0.0
    while left > 0:
        best = np.inf
        arg = -1
        for l in range(n_links):
            if denom[l] > 1e-12:
                v = resid[l] / denom[l]
                if v < best:
                    best = v
                    arg = l
        if arg < 0:
            break
        level += best
        for l in range(n_links):
            if denom[l] > 1e-12:
                resid[l] -= best * denom[l]
        resid[arg] = 0.0
        for l in range(n_links):
            if denom[l] > 1e-12 and resid[l] <= 1e-12 * cap[l]:
                for p in range(l_ptr[l], l_ptr[l + 1]):
                    c = l_cls[p]
                    if not frozen[c]:
                        frozen[c] = True
                        x[c] = level
                        left -= 1
                        for q in range(c_ptr[c], c_ptr[c + 1]):
                            denom[c_link[q]] -= counts[c] * c_coef[q]
                denom[l] = 0.0
    return x


def _csr(rows: Sequence[Sequence[tuple[int, float]]]):
    ptr = np.zeros(len(rows) + 1, dtype=np.int64)
    for i, r in enumerate(rows):
        ptr[i + 1] = ptr[i] + len(r)
    idx = np.fromiter((l for r in rows for l, _ in r), dtype=np.int64, count=int(ptr[-1]))
    coef = np.fromiter((w for r in rows for _, w in r), dtype=np.float64, count=int(ptr[-1]))
    return ptr, idx, coef


def _transpose(ptr, idx, n_cols):
    order = np.argsort(idx, kind="stable")
    rows = np.repeat(np.arange(ptr.size - 1), np.diff(ptr))
    t_ptr = np.zeros(n_cols + 1, dtype=np.int64)
    np.cumsum(np.bincount(idx, minlength=n_cols), out=t_ptr[1:])
    return t_ptr, rows[order].astype(np.int64)


def max_min_rates(
    routes: Sequence[Sequence[tuple[Sequence[int], float]]], capacities: Sequence[float]
) -> np.ndarray:
    """Max-min fair rates by progressive filling.

    ``routes[i]`` lists flow i's (link indices, share-weight) pairs. The
    returned rate is the flow's total; each route carries weight * rate.
    """
    cap = np.asarray(capacities, dtype=float)
    rows = []
    for i, flow_routes in enumerate(routes):
        acc: dict[int, float] = {}
        for links, w in flow_routes:
            for l in links:
                if not 0 <= l < cap.size:
                    raise SimulationError(f"flow {i} references unknown link {l}")
                acc[l] = acc.get(l, 0.0) + w
        if not acc:
            raise SimulationError(f"flow {i} has no links")
        rows.append(sorted(acc.items()))
    ptr, idx, coef = _csr(rows)
    l_ptr, l_cls = _transpose(ptr, idx, cap.size)
    return _fill(ptr, idx, coef, l_ptr, l_cls, cap, np.ones(len(rows)))


# --------------------------------------------------------------------- routes

@dataclass(frozen=True)
class _Route:
    inter: tuple[tuple[int, float], ...]  # (compact inter-link index, coefficient)
    intra: tuple[tuple[int, float], ...]  # (compact intra-link index, coefficient)
    links: tuple[tuple[int, float], ...]  # (topology link index, coefficient)


class _RouteBook:
    """Caches routes by key.

    Keys: ("rail", src, dst, n) over rail n; ("spine", src, dst, j) from the
    source GPU's own NIC to the destination GPU's own NIC through spine j;
    ("reps", src, dst) sprayed over every source NIC and spine.
    """

    def __init__(self, topo: RailTopology):
        self.topo = topo
        links = topo.links
        intra = np.array([l.kind in INTRA_KINDS for l in links])
        self.inter_ids = np.flatnonzero(~intra)
        self.intra_ids = np.flatnonzero(intra)
        self._inter_pos = {int(g): i for i, g in enumerate(self.inter_ids)}
        self._intra_pos = {int(g): i for i, g in enumerate(self.intra_ids)}
        caps = np.asarray(topo.capacities())
        self.inter_cap = caps[self.inter_ids]
        self.intra_cap = caps[self.intra_ids]
        self._cache: dict[tuple, _Route] = {}
        self._keys: dict[tuple, int] = {}
        self.key_list: list[tuple] = []

    def key_id(self, key: tuple) -> int:
        i = self._keys.get(key)
        if i is None:
            i = self._keys[key] = len(self.key_list)
            self.key_list.append(key)
        return i

    def paths(self, key: tuple) -> list[tuple[Path, float]]:
        topo = self.topo
        kind, src, dst = key[0], key[1], key[2]
        (k, g), (f, m) = src, dst
        if kind == "rail":
            return [(rail_path(topo, src, dst, key[3]), 1.0)]
        if kind == "spine":
            return [(spine_path(topo, (k, g), (f, m), key[3]), 1.0)]
        if kind == "reps":
            N, S = topo.N, topo.spine_count
            out = []
            for n in range(N):
                if n == m:
                    out.append((rail_path(topo, src, dst, m), 1.0 / N))
                else:
                    out += [
                        (spine_path(topo, (k, n), (f, m), j, src_gpu=g, dst_gpu=m), 1.0 / (N * S))
                        for j in range(S)
                    ]
            return out
        raise SimulationError(f"unknown route kind {kind!r}")

    def _weighted_links(self, key: tuple) -> list[tuple[list[LinkId], float]]:
        """Same routes as ``paths`` as plain link lists (no contiguity checks)."""
        kind, (k, g), (f, m) = key[0], key[1], key[2]
        if kind == "rail":
            n = key[3]
            links = [gpu_up(k, g, n)] if g != n else []
            links += [nic_up(k, n), nic_down(f, n)]
            if m != n:
                links.append(gpu_down(f, n, m))
            return [(links, 1.0)]
        if kind == "spine":
            if g == m:
                return [([nic_up(k, g), nic_down(f, m)], 1.0)]
            j = key[3]
            return [([nic_up(k, g), spine_up(g, j), spine_down(j, m), nic_down(f, m)], 1.0)]
        if kind == "reps":
            N, S = self.topo.N, self.topo.spine_count
            out = []
            for n in range(N):
                head = [gpu_up(k, g, n)] if g != n else []
                if n == m:
                    out.append((head + [nic_up(k, n), nic_down(f, n)], 1.0 / N))
                    continue
                for j in range(S):
                    out.append((
                        head + [nic_up(k, n), spine_up(n, j), spine_down(j, m), nic_down(f, m)],
                        1.0 / (N * S),
                    ))
            return out
        return [(list(p), w) for p, w in self.paths(key)]

    def get(self, key: tuple) -> _Route:
        r = self._cache.get(key)
        if r is None:
            acc: dict[int, float] = {}
            for links, w in self._weighted_links(key):
                for link in links:
                    li = self.topo.link_index(link)
                    acc[li] = acc.get(li, 0.0) + w
            items = tuple(sorted(acc.items()))
            inter = tuple((self._inter_pos[l], w) for l, w in items if l in self._inter_pos)
            intra = tuple((self._intra_pos[l], w) for l, w in items if l in self._intra_pos)
            r = self._cache[key] = _Route(inter, intra, items)
        return r


def stable_hash(*parts) -> int:
    blob = repr(parts).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")


def _ecmp_key(topo: RailTopology, fl: AtomicFlow, seed: int, attempt: int = 0) -> tuple:
    if fl.src[1] == fl.dst[1]:
        return ("spine", fl.src, fl.dst, 0)
    j = stable_hash(seed, fl.src, fl.dst, fl.id, attempt) % topo.spine_count
    return ("spine", fl.src, fl.dst, j)


def _minrtt_keys(book: _RouteBook, chunks: Sequence[AtomicFlow], quantum: int) -> list[tuple]:
    """Each chunk, in id order, takes the spine with the least estimated backlog delay.

    Delay of a candidate is (max, then sum) over its links of backlog / capacity,
    where backlog counts every byte already assigned to the link. Ties go to
    the lowest spine index.
    """
    S = book.topo.spine_count
    backlog = np.zeros(book.inter_cap.size)
    cache: dict[tuple, tuple] = {}
    order = np.arange(S)
    keys = []
    for fl in chunks:
        entry = cache.get((fl.src, fl.dst))
        if entry is None:
            if fl.src[1] == fl.dst[1]:
                cands = [("spine", fl.src, fl.dst, 0)]
            else:
                cands = [("spine", fl.src, fl.dst, j) for j in range(S)]
            idx = np.array([[l for l, _ in book.get(k).inter] for k in cands], dtype=np.int64)
            entry = cache[(fl.src, fl.dst)] = (cands, idx, book.inter_cap[idx])
        cands, idx, cap = entry
        j = 0
        if len(cands) > 1:
            b = backlog[idx]
            if quantum > 1:
                b = np.floor(b / quantum) * quantum
            delay = b / cap
            j = int(np.lexsort((order, delay.sum(axis=1), delay.max(axis=1)))[0])
        backlog[idx[j]] += fl.bytes
        keys.append(cands[j])
    return keys


def _check_flows(topo: RailTopology, flows: Sequence[AtomicFlow]) -> None:
    for fl in flows:
        for d, g in (fl.src, fl.dst):
            if not (0 <= d < topo.M and 0 <= g < topo.N):
                raise SimulationError(f"flow {fl.id} endpoint ({d}, {g}) outside the topology")
        if fl.src[0] == fl.dst[0]:
            raise SimulationError(f"flow {fl.id} stays inside domain {fl.src[0]}; nothing to route")


def materialize(
    topo: RailTopology, flows: Sequence[AtomicFlow], policy: PolicyDescriptor, seed: int,
    book: Optional[_RouteBook] = None,
) -> tuple[list[AtomicFlow], list[tuple], dict]:
    """Turn messages into simulated flows and route keys according to ``policy``."""
    if book is None:
        book = _RouteBook(topo)
    meta: dict = {}
    kind = policy.kind
    if kind == "rails_lpt":
        chunks, assignment, states = rail_assignment(
            flows, topo.N, policy.chunk_bytes, policy.qps_per_rail, topo.M
        )
        keys = [("rail", c.src, c.dst, assignment.rail[c.id]) for c in chunks]
        meta["lpt_loads"] = [list(s.loads) for s in states]
        meta["lpt_mse"] = [s.mse() for s in states]
        meta["qp_max"] = max(assignment.qp.values(), default=0)
        return chunks, keys, meta
    if kind == "uniform_oracle":
        chunks, keys = [], []
        for msg in flows:
            for n, part in enumerate(split_even(msg.bytes, topo.N)):
                if part:
                    chunks.append(AtomicFlow(len(chunks), msg.src, msg.dst, part, msg.message))
                    keys.append(("rail", msg.src, msg.dst, n))
        return chunks, keys, meta
    if kind == "minrtt":
        chunks = chunk_all(flows, policy.chunk_bytes)
        return chunks, _minrtt_keys(book, chunks, policy.probe_quantum), meta
    if kind in ("ecmp", "plb"):
        return list(flows), [_ecmp_key(topo, fl, seed) for fl in flows], meta
    if kind == "reps":
        return list(flows), [("reps", fl.src, fl.dst) for fl in flows], meta
    raise SimulationError(f"policy {kind!r} not supported by the simulator")


def flow_states(
    topo: RailTopology, flows: Sequence[AtomicFlow], policy: PolicyDescriptor,
    seed: Optional[int] = None,
) -> list[FlowState]:
    """Initial per-flow state with explicit paths, for inspection."""
    seed = policy.seed if seed is None else seed
    _check_flows(topo, flows)
    book = _RouteBook(topo)
    sim_flows, keys, _ = materialize(topo, flows, policy, seed, book)
    return [FlowState(fl.id, float(fl.bytes), book.paths(k)) for fl, k in zip(sim_flows, keys)]


# ------------------------------------------------------------------ simulator

class _Classes:
    """Flow classes keyed by inter-link signature, with CSR views for the fill."""

    def __init__(self, book: _RouteBook, M: int):
        self.book = book
        self.M = M
        self._ids: dict[tuple, int] = {}
        self.sigs: list[tuple] = []
        self.pair: list[int] = []
        self.src_nic: list[int] = []
        self.dst_nic: list[int] = []
        self.spine: list[bool] = []
        self._dirty = True

    def of_key(self, key: tuple) -> int:
        sig = self.book.get(key).inter
        c = self._ids.get(sig)
        if c is None:
            c = self._ids[sig] = len(self.sigs)
            self.sigs.append(sig)
            self.pair.append(key[1][0] * self.M + key[2][0])
            topo = self.book.topo
            pos = self.book._inter_pos
            # source and destination NIC links of single-route keys (used by PLB)
            if key[0] == "spine":
                self.src_nic.append(pos[topo.link_index(nic_up(key[1][0], key[1][1]))])
                self.dst_nic.append(pos[topo.link_index(nic_down(key[2][0], key[2][1]))])
                self.spine.append(key[1][1] != key[2][1])
            else:
                self.src_nic.append(-1)
                self.dst_nic.append(-1)
                self.spine.append(False)
            self._dirty = True
        return c

    def arrays(self):
        if self._dirty:
            ptr, idx, coef = _csr(self.sigs)
            l_ptr, l_cls = _transpose(ptr, idx, self.book.inter_cap.size)
            self._arr = (ptr, idx, coef, l_ptr, l_cls)
            self._pair = np.asarray(self.pair, dtype=np.int64)
            self._src = np.asarray(self.src_nic, dtype=np.int64)
            self._dst = np.asarray(self.dst_nic, dtype=np.int64)
            self._spine = np.asarray(self.spine, dtype=bool)
            self._dirty = False
        return self._arr

    def __len__(self) -> int:
        return len(self.sigs)


def _intra_matrix(book: _RouteBook, key_ids: np.ndarray):
    """Sparse (intra links x flows) coefficient matrix, or None when no flow uses an intra link."""
    from scipy.sparse import csr_matrix

    per_key = [book.get(k).intra for k in book.key_list]
    counts = np.array([len(e) for e in per_key], dtype=np.int64)
    if not counts.any():
        return None
    ptr = np.concatenate(([0], np.cumsum(counts)))
    links = np.fromiter((l for e in per_key for l, _ in e), dtype=np.int64, count=int(ptr[-1]))
    coefs = np.fromiter((w for e in per_key for _, w in e), dtype=np.float64, count=int(ptr[-1]))
    n = counts[key_ids]
    cols = np.repeat(np.arange(key_ids.size), n)
    pos = np.repeat(ptr[key_ids], n) + (np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n))
    return csr_matrix((coefs[pos], (links[pos], cols)), shape=(book.intra_cap.size, key_ids.size))


def simulate(
    topo: RailTopology,
    flows: Sequence[AtomicFlow],
    policy: PolicyDescriptor,
    seed: Optional[int] = None,
    check_invariants: bool = True,
) -> SimResult:
    """Run the fluid simulation of ``flows`` (messages) under ``policy``.

    Chunking policies split the messages themselves. With ``check_invariants``
    the domain-pair ceiling N*R2, intra-link headroom and per-link byte
    ceilings are asserted; the measured maxima are always in ``meta``.
    """
    if not flows:
        raise SimulationError("nothing to simulate")
    seed = policy.seed if seed is None else seed
    _check_flows(topo, flows)
    book = _RouteBook(topo)
    sim_flows, keys, meta = materialize(topo, flows, policy, seed, book)
    F = len(sim_flows)
    classes = _Classes(book, topo.M)

    size = np.array([fl.bytes for fl in sim_flows], dtype=np.float64)
    key_id = np.array([book.key_id(k) for k in keys], dtype=np.int64)
    class_of_key = np.array([classes.of_key(k) for k in book.key_list], dtype=np.int64)
    class_of = class_of_key[key_id]
    remaining = size.copy()
    seg_start = size.copy()
    completion = np.full(F, np.nan)
    link_bytes = np.zeros(len(topo.links))
    intra = _intra_matrix(book, key_id)

    plb = policy.kind == "plb"
    repaths = np.zeros(F, dtype=np.int64)
    last_repath = np.full(F, -2, dtype=np.int64)
    repath_total = 0

    pair_cap = topo.N * topo.R2
    max_pair_ratio = 0.0
    max_intra_util = 0.0
    max_residual = 0.0
    t = 0.0
    events = 0
    active = np.arange(F)

    while active.size:
        ptr, idx, coef, l_ptr, l_cls = classes.arrays()
        cls = class_of[active]
        counts = np.bincount(cls, minlength=len(classes)).astype(np.float64)
        x = _fill(ptr, idx, coef, l_ptr, l_cls, book.inter_cap, counts)
        rate = x[cls]
        if not (rate > 0).all():
            raise SimulationError("a flow received zero rate")

        pair_rate = np.bincount(classes._pair, weights=counts * x, minlength=topo.M * topo.M)
        max_pair_ratio = max(max_pair_ratio, float(pair_rate.max()) / pair_cap)
        if intra is not None:
            full = np.zeros(F)
            full[active] = rate
            util = float((intra @ full / book.intra_cap).max())
            max_intra_util = max(max_intra_util, util)
        if check_invariants:
            if max_pair_ratio > 1 + RTOL:
                raise SimulationError(
                    f"domain-pair rate {max_pair_ratio:.12f} x N*R2 at t={t}"
                )
            if max_intra_util > 1 + RTOL:
                raise SimulationError(f"intra-domain link over capacity at t={t}")

        dt = float((remaining[active] / rate).min())
        t += dt
        remaining[active] -= rate * dt
        done_mask = remaining[active] < RESIDUAL_BYTES
        done = active[done_mask]
        if done.size:
            # a clamped flow finishes its last fraction of a byte at its current rate
            tail = remaining[done]
            max_residual = max(max_residual, float(np.abs(tail).max()))
            completion[done] = t + np.maximum(tail, 0.0) / rate[done_mask]
        remaining[done] = 0.0
        active = active[~done_mask]
        events += 1

        if plb and active.size:
            repath_total += _plb_hook(
                topo, policy, seed, book, classes, sim_flows, active, class_of, key_id,
                counts, x, remaining, seg_start, link_bytes, repaths, last_repath, events,
            )

    # bytes of each flow's last route segment
    seg_by_key = np.bincount(key_id, weights=seg_start, minlength=len(book.key_list))
    for kid in np.flatnonzero(seg_by_key):
        for l, w in book.get(book.key_list[kid]).links:
            link_bytes[l] += w * seg_by_key[kid]

    M, N = topo.M, topo.N
    send = np.zeros((M, N))
    recv = np.zeros((M, N))
    for i, link in enumerate(topo.links):
        if link.kind is LinkKind.NIC_TO_LEAF_UP:
            send[link.idx] = link_bytes[i]
        elif link.kind is LinkKind.LEAF_TO_NIC_DOWN:
            n, d = link.idx
            recv[d, n] = link_bytes[i]

    t = float(np.max(completion))
    caps = np.asarray(topo.capacities())
    link_util = float((link_bytes / (caps * t)).max()) if t > 0 else 0.0
    if check_invariants and link_util > 1 + RTOL:
        raise SimulationError(f"link carried {link_util:.12f} x capacity * T")

    msg_keys = np.array([fl.message if fl.message >= 0 else fl.id for fl in sim_flows])
    message_ids, inverse = np.unique(msg_keys, return_inverse=True)
    message_completion = np.zeros(message_ids.size)
    np.maximum.at(message_completion, inverse, completion)

    meta.update(
        events=events,
        classes=len(classes),
        max_pair_rate_ratio=max_pair_ratio,
        max_intra_utilization=max_intra_util,
        max_link_utilization=link_util,
        max_clamped_residual=max_residual,
    )
    if plb:
        meta["repaths"] = repath_total
        meta["repath_threshold"] = policy.repath_threshold
    return SimResult(
        policy=policy,
        seed=seed,
        flows=tuple(sim_flows),
        completion=completion,
        message_ids=message_ids,
        message_completion=message_completion,
        total_time=t,
        link_bytes=link_bytes,
        send_volume=send,
        recv_volume=recv,
        meta=meta,
    )


def _plb_hook(
    topo, policy, seed, book, classes, sim_flows, active, class_of, key_id,
    counts, x, remaining, seg_start, link_bytes, repaths, last_repath, event,
) -> int:
    """Re-hash spine-routed flows whose last-interval rate starved.

    A flow is starved when its rate fell below ``repath_threshold`` times its
    endpoint fair share (NIC capacity over the flows sharing its source or
    destination NIC, whichever is smaller). A flow that just moved waits one
    event before it may move again.
    """
    n_links = book.inter_cap.size
    n_cls = counts.size
    # arrays() ran at the start of this event, so the cached views cover every counted class
    src, dst, spine = classes._src[:n_cls], classes._dst[:n_cls], classes._spine[:n_cls]
    nic = src >= 0
    n_up = np.bincount(src[nic], weights=counts[nic], minlength=n_links)
    n_down = np.bincount(dst[nic], weights=counts[nic], minlength=n_links)
    c = class_of[active]
    eligible = spine[c] & (last_repath[active] < event - 1)
    cand, cc = active[eligible], c[eligible]
    if not cand.size:
        return 0
    cap = book.inter_cap
    share = np.minimum(cap[src[cc]] / n_up[src[cc]], cap[dst[cc]] / n_down[dst[cc]])
    starved = cand[x[cc] < policy.repath_threshold * share]
    for fid in starved:
        old = book.key_list[key_id[fid]]
        delivered = seg_start[fid] - remaining[fid]
        for l, w in book.get(old).links:
            link_bytes[l] += w * delivered
        seg_start[fid] = remaining[fid]
        repaths[fid] += 1
        last_repath[fid] = event
        new = _ecmp_key(topo, sim_flows[fid], seed, int(repaths[fid]))
        key_id[fid] = book.key_id(new)
        class_of[fid] = classes.of_key(new)
    return int(starved.size)
