"""Rail-optimized network description and path construction.

A domain holds ``N`` GPUs, and GPU ``(d, n)`` owns ``NIC(d, n)``. The n-th NIC
of every domain attaches to leaf switch ``n``, so the fabric has ``N``
parallel rails. Leaves are fully meshed to a spine layer. All links are
unidirectional and rates are stored in bytes per second.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

Node = tuple  # ("gpu", d, g) | ("nic", d, n) | ("leaf", n) | ("spine", j)


class TopologyError(ValueError):
    pass


class LinkKind(str, enum.Enum):
    GPU_TO_NIC_UP = "gpu_to_nic_up"
    NIC_TO_GPU_DOWN = "nic_to_gpu_down"
    NIC_TO_LEAF_UP = "nic_to_leaf_up"
    LEAF_TO_NIC_DOWN = "leaf_to_nic_down"
    LEAF_TO_SPINE_UP = "leaf_to_spine_up"
    SPINE_TO_LEAF_DOWN = "spine_to_leaf_down"


INTRA_KINDS = frozenset({LinkKind.GPU_TO_NIC_UP, LinkKind.NIC_TO_GPU_DOWN})
SPINE_KINDS = frozenset({LinkKind.LEAF_TO_SPINE_UP, LinkKind.SPINE_TO_LEAF_DOWN})


class LinkId(NamedTuple):
    """A directed link.

    Index layout per kind:

    - gpu_to_nic_up: (domain, gpu, nic)
    - nic_to_gpu_down: (domain, nic, gpu)
    - nic_to_leaf_up: (domain, rail)
    - leaf_to_nic_down: (rail, domain)
    - leaf_to_spine_up: (leaf, spine)
    - spine_to_leaf_down: (spine, leaf)
    """

    kind: LinkKind
    idx: tuple

    @property
    def tail(self) -> Node:
        k, i = self.kind, self.idx
        if k is LinkKind.GPU_TO_NIC_UP:
            return ("gpu", i[0], i[1])
        if k is LinkKind.NIC_TO_GPU_DOWN:
            return ("nic", i[0], i[1])
        if k is LinkKind.NIC_TO_LEAF_UP:
            return ("nic", i[0], i[1])
        if k is LinkKind.LEAF_TO_NIC_DOWN:
            return ("leaf", i[0])
        if k is LinkKind.LEAF_TO_SPINE_UP:
            return ("leaf", i[0])
        return ("spine", i[0])

    @property
    def head(self) -> Node:
        k, i = self.kind, self.idx
        if k is LinkKind.GPU_TO_NIC_UP:
            return ("nic", i[0], i[2])
        if k is LinkKind.NIC_TO_GPU_DOWN:
            return ("gpu", i[0], i[2])
        if k is LinkKind.NIC_TO_LEAF_UP:
            return ("leaf", i[1])
        if k is LinkKind.LEAF_TO_NIC_DOWN:
            return ("nic", i[1], i[0])
        if k is LinkKind.LEAF_TO_SPINE_UP:
            return ("spine", i[1])
        return ("leaf", i[1])

    def __str__(self) -> str:
        return f"{self.kind.value}{self.idx}"


def gpu_up(d: int, g: int, n: int) -> LinkId:
    return LinkId(LinkKind.GPU_TO_NIC_UP, (d, g, n))


def gpu_down(d: int, n: int, g: int) -> LinkId:
    return LinkId(LinkKind.NIC_TO_GPU_DOWN, (d, n, g))


def nic_up(d: int, n: int) -> LinkId:
    return LinkId(LinkKind.NIC_TO_LEAF_UP, (d, n))


def nic_down(d: int, n: int) -> LinkId:
    """Leaf ``n`` to ``NIC(d, n)``."""
    return LinkId(LinkKind.LEAF_TO_NIC_DOWN, (n, d))


def spine_up(leaf: int, j: int) -> LinkId:
    return LinkId(LinkKind.LEAF_TO_SPINE_UP, (leaf, j))


def spine_down(j: int, leaf: int) -> LinkId:
    return LinkId(LinkKind.SPINE_TO_LEAF_DOWN, (j, leaf))


@dataclass(frozen=True)
class Path:
    src: tuple[int, int]
    dst: tuple[int, int]
    links: tuple[LinkId, ...]

    def __post_init__(self):
        if not self.links:
            raise TopologyError("empty path")
        for a, b in zip(self.links, self.links[1:]):
            if a.head != b.tail:
                raise TopologyError(f"path not contiguous at {a} -> {b}")

    @property
    def uses_spine(self) -> bool:
        return any(link.kind in SPINE_KINDS for link in self.links)

    def __len__(self) -> int:
        return len(self.links)

    def __iter__(self) -> Iterator[LinkId]:
        return iter(self.links)


_RATE_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([kKmMgGtT]?)\s*(?:b/?s|bps)?\s*$")
_SUFFIX = {"": 1.0, "k": 1e3, "m": 1e6, "g": 1e9, "t": 1e12}


def parse_rate(value) -> float:
    """Parse a rate in bits/s ("100G", "25 Gbps", 4e11) into bytes/s."""
    if isinstance(value, bool):
        raise TopologyError(f"invalid rate {value!r}")
    if isinstance(value, (int, float)):
        bits = float(value)
    else:
        m = _RATE_RE.match(str(value))
        if not m:
            raise TopologyError(f"invalid rate {value!r}")
        bits = float(m.group(1)) * _SUFFIX[m.group(2).lower()]
    return bits / 8.0


def format_rate(bytes_per_s: float) -> str:
    bits = bytes_per_s * 8.0
    for suffix, scale in (("T", 1e12), ("G", 1e9), ("M", 1e6), ("k", 1e3)):
        if bits >= scale and bits % scale == 0:
            return f"{int(bits // scale)}{suffix}"
    return repr(bits)


@dataclass(frozen=True)
class RailTopology:
    """M domains by N rails. Rates in bytes/s."""

    M: int
    N: int
    R1: float
    R2: float
    spine_count: int
    leaf_spine_capacity: float
    _links: tuple = field(default=(), init=False, repr=False, compare=False)
    _index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.M, int) or self.M < 2:
            raise TopologyError(f"M must be an integer >= 2, got {self.M!r}")
        if not isinstance(self.N, int) or self.N < 1:
            raise TopologyError(f"N must be an integer >= 1, got {self.N!r}")
        if not isinstance(self.spine_count, int) or self.spine_count < 1:
            raise TopologyError(f"spine_count must be an integer >= 1, got {self.spine_count!r}")
        for name in ("R1", "R2", "leaf_spine_capacity"):
            if not getattr(self, name) > 0:
                raise TopologyError(f"{name} must be strictly positive")
        if not self.R1 > self.R2:
            raise TopologyError(
                "R1 must exceed R2: the intra-domain rate has to be higher than the "
                "inter-domain rate for the N*R2 domain-pair capacity to hold"
            )
        links = tuple(self._enumerate())
        object.__setattr__(self, "_links", links)
        self._index.update({link: i for i, link in enumerate(links)})

    def _enumerate(self) -> Iterator[LinkId]:
        M, N = self.M, self.N
        for d in range(M):
            for g in range(N):
                for n in range(N):
                    if g != n:
                        yield gpu_up(d, g, n)
            for n in range(N):
                for g in range(N):
                    if g != n:
                        yield gpu_down(d, n, g)
        for d in range(M):
            for n in range(N):
                yield nic_up(d, n)
        for n in range(N):
            for d in range(M):
                yield nic_down(d, n)
        for leaf in range(N):
            for j in range(self.spine_count):
                yield spine_up(leaf, j)
        for j in range(self.spine_count):
            for leaf in range(N):
                yield spine_down(j, leaf)

    @property
    def links(self) -> tuple[LinkId, ...]:
        return self._links

    def link_index(self, link: LinkId) -> int:
        try:
            return self._index[link]
        except KeyError:
            raise TopologyError(f"link {link} not in topology") from None

    def capacity(self, link: LinkId) -> float:
        self.link_index(link)
        if link.kind in INTRA_KINDS:
            return self.R1
        if link.kind in SPINE_KINDS:
            return self.leaf_spine_capacity
        return self.R2

    def capacities(self) -> list[float]:
        return [self.capacity(link) for link in self._links]

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "N": self.N,
            "R1": self.R1,
            "R2": self.R2,
            "spine_count": self.spine_count,
            "leaf_spine_capacity": self.leaf_spine_capacity,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=6).hexdigest()


def build_topology(
    M: int,
    N: int,
    R2: float,
    R1: Optional[float] = None,
    spine_count: Optional[int] = None,
    leaf_spine_capacity: Optional[float] = None,
    oversubscription: float = 1.0,
) -> RailTopology:
    """Build a validated topology; rates in bytes/s.

    Defaults: ``R1 = 8 * R2``, ``spine_count = N`` and a leaf-spine rate that
    makes each leaf's spine uplinks match its ``M`` NIC ports, divided by
    ``oversubscription``.
    """
    if R1 is None:
        R1 = 8.0 * R2
    if spine_count is None:
        spine_count = N
    if leaf_spine_capacity is None:
        if not oversubscription > 0:
            raise TopologyError("oversubscription must be positive")
        if not isinstance(spine_count, int) or spine_count < 1:
            raise TopologyError(f"spine_count must be an integer >= 1, got {spine_count!r}")
        leaf_spine_capacity = M * R2 / spine_count / oversubscription
    return RailTopology(
        M=M, N=N, R1=float(R1), R2=float(R2), spine_count=spine_count,
        leaf_spine_capacity=float(leaf_spine_capacity),
    )


def domain_pair_capacity(topo: RailTopology, k: int, f: int) -> float:
    """Maximum unidirectional throughput from domain ``k`` to domain ``f``."""
    _check_domain(topo, k)
    _check_domain(topo, f)
    if k == f:
        raise TopologyError("domain pair capacity needs two distinct domains")
    return topo.N * topo.R2


def domain_egress_cut(topo: RailTopology, k: int) -> list[LinkId]:
    """Links leaving the node set of domain ``k``."""
    inside = lambda node: node[0] in ("gpu", "nic") and node[1] == k
    return [l for l in topo.links if inside(l.tail) and not inside(l.head)]


def _check_domain(topo: RailTopology, d: int) -> None:
    if not 0 <= d < topo.M:
        raise TopologyError(f"domain {d} out of range [0, {topo.M})")


def _check_local(topo: RailTopology, i: int, what: str) -> None:
    if not 0 <= i < topo.N:
        raise TopologyError(f"{what} {i} out of range [0, {topo.N})")


def rail_path(topo: RailTopology, src: Sequence[int], dst: Sequence[int], rail: int) -> Path:
    """Route GPU ``src`` to GPU ``dst`` over rail ``rail`` without touching a spine."""
    (k, g), (f, m) = src, dst
    _check_domain(topo, k)
    _check_domain(topo, f)
    _check_local(topo, g, "gpu")
    _check_local(topo, m, "gpu")
    _check_local(topo, rail, "rail")
    if k == f:
        raise TopologyError("rail paths connect distinct domains")
    links = []
    if g != rail:
        links.append(gpu_up(k, g, rail))
    links += [nic_up(k, rail), nic_down(f, rail)]
    if m != rail:
        links.append(gpu_down(f, rail, m))
    return Path((k, g), (f, m), tuple(links))


def spine_path(
    topo: RailTopology,
    src_nic: Sequence[int],
    dst_nic: Sequence[int],
    spine: int,
    src_gpu: Optional[int] = None,
    dst_gpu: Optional[int] = None,
) -> Path:
    """Route ``NIC(k, n)`` to ``NIC(f, m)`` through spine ``spine``.

    When ``n == m`` the two NICs share a leaf and the direct rail route is
    returned. ``src_gpu``/``dst_gpu`` default to the NIC indices; when they
    differ an intra-domain hop is added at that end.
    """
    (k, n), (f, m) = src_nic, dst_nic
    if not 0 <= spine < topo.spine_count:
        raise TopologyError(f"spine {spine} out of range [0, {topo.spine_count})")
    g = n if src_gpu is None else src_gpu
    h = m if dst_gpu is None else dst_gpu
    for i, what in ((n, "nic"), (m, "nic"), (g, "gpu"), (h, "gpu")):
        _check_local(topo, i, what)
    _check_domain(topo, k)
    _check_domain(topo, f)
    if k == f:
        raise TopologyError("spine paths connect distinct domains")
    links = []
    if g != n:
        links.append(gpu_up(k, g, n))
    links.append(nic_up(k, n))
    if n != m:
        links += [spine_up(n, spine), spine_down(spine, m)]
    links.append(nic_down(f, m))
    if h != m:
        links.append(gpu_down(f, m, h))
    return Path((k, g), (f, h), tuple(links))


def topology_from_config(section: dict) -> RailTopology:
    """Build from a config mapping with rates given in bits/s."""
    def rate(key):
        v = section.get(key)
        return None if v is None else parse_rate(v)

    return build_topology(
        M=section["M"],
        N=section["N"],
        R2=rate("R2"),
        R1=rate("R1"),
        spine_count=section.get("spine_count"),
        leaf_spine_capacity=rate("leaf_spine_capacity"),
        oversubscription=section.get("oversubscription", 1.0),
    )


__all__ = [
    "INTRA_KINDS", "LinkId", "LinkKind", "Path", "RailTopology", "SPINE_KINDS", "TopologyError",
    "build_topology", "domain_egress_cut", "domain_pair_capacity", "format_rate", "parse_rate",
    "rail_path", "spine_path", "topology_from_config",
]
