"""Node roles, link-state topology, deterministic routing and self-healing.

Forwarding-capable nodes flood per-origin neighbor advertisements; an
undirected edge enters the working graph once both endpoints advertise it
(edges to leaf-class nodes are confirmed by the forwarder side alone).
Routing is shortest-path by hop count with deterministic tie-breaking:
higher bottleneck link quality first, then the lowest first-hop id.  Three
consecutive missed expected transmissions remove an edge and trigger a
topology version bump, a flood and a route recomputation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

LEADER = "leader"
FULL = "full"
HALF = "half"
LEAF = "leaf"
BORDER = "border"
SMART_DEVICE = "smart_device"

ROLES = (LEADER, FULL, HALF, LEAF, BORDER, SMART_DEVICE)

# role -> (may_forward, may_lead, always_on)
ROLE_CAPS: Dict[str, Tuple[bool, bool, bool]] = {
    LEADER: (True, True, True),
    FULL: (True, True, False),
    HALF: (True, False, False),
    LEAF: (False, False, False),
    BORDER: (True, False, True),
    SMART_DEVICE: (False, False, False),
}

DEFAULT_TTL = 16
BEACON_MISS_LIMIT = 3


class MeshError(Exception):
    pass


@dataclass
class NodeDescriptor:
    id: int
    role: str
    position: Tuple[float, float, float]
    zone: int = 0

    def __post_init__(self):
        if self.role not in ROLE_CAPS:
            raise MeshError(f"unknown role {self.role!r}")

    @property
    def may_forward(self) -> bool:
        return ROLE_CAPS[self.role][0]

    @property
    def may_lead(self) -> bool:
        return ROLE_CAPS[self.role][1]

    @property
    def always_on(self) -> bool:
        return ROLE_CAPS[self.role][2]

    @property
    def has_ethernet(self) -> bool:
        return self.role == BORDER


@dataclass
class MeshPacket:
    """Logical multi-hop unit; the payload is one adaptation-layer unit."""

    src: int
    dst: int
    seq: int
    payload: bytes
    ttl: int = DEFAULT_TTL


@dataclass
class Edge:
    quality: float
    last_seen_superframe: int


class TopologyGraph:
    """Link-state view: per-origin adjacency advertisements with versions.

    The working edge set contains (a, b) iff a's latest advertisement lists b
    and b's lists a; edges whose far end cannot forward (leaf, smart device)
    are confirmed by the forwarder side alone and only ever serve as the last
    hop of a path.
    """

    def __init__(self, roles: Optional[Dict[int, str]] = None):
        self.roles = roles or {}
        self.versions: Dict[int, int] = {}
        self._adjacency: Dict[int, Dict[int, float]] = {}

    def _forwarding(self, node: int) -> bool:
        role = self.roles.get(node)
        return role is None or ROLE_CAPS[role][0]

    def apply_advertisement(
        self, origin: int, version: int, neighbors: Iterable[Tuple[int, float]]
    ) -> bool:
        """Install an origin's neighbor list if the version is new."""
        if version <= self.versions.get(origin, -1):
            return False
        self.versions[origin] = version
        self._adjacency[origin] = dict(neighbors)
        return True

    def advertisement(self, origin: int) -> Tuple[int, Tuple[Tuple[int, float], ...]]:
        version = self.versions.get(origin, 0)
        adj = self._adjacency.get(origin, {})
        return version, tuple(sorted(adj.items()))

    def edges(self) -> Dict[FrozenSet[int], float]:
        confirmed: Dict[FrozenSet[int], float] = {}
        for a, nbrs in self._adjacency.items():
            for b, quality in nbrs.items():
                if not self._forwarding(b):
                    confirmed[frozenset((a, b))] = quality
                elif a in self._adjacency.get(b, {}):
                    q = min(quality, self._adjacency[b][a])
                    confirmed[frozenset((a, b))] = q
        return confirmed

    def vertices(self) -> Set[int]:
        nodes: Set[int] = set()
        for edge in self.edges():
            nodes |= edge
        return nodes

    def neighbor_map(self) -> Dict[int, Dict[int, float]]:
        out: Dict[int, Dict[int, float]] = {}
        for edge, quality in self.edges().items():
            a, b = sorted(edge)
            out.setdefault(a, {})[b] = quality
            out.setdefault(b, {})[a] = quality
        return out

    def export_edge_list(self) -> str:
        lines = []
        for edge, quality in sorted(self.edges().items(), key=lambda e: sorted(e[0])):
            a, b = sorted(edge)
            lines.append(f"{a} {b} {quality!r}")
        return "\n".join(lines) + ("\n" if lines else "")


def compute_routes(graph: TopologyGraph, source: int) -> Dict[int, int]:
    """Next-hop table from `source`: shortest path by hop count, ties broken
    by higher bottleneck quality, then the lowest first-hop id.  Unreachable
    destinations are absent.  Non-forwarding nodes are never expanded, so they
    only appear as final hops."""
    nbrs = graph.neighbor_map()
    if source not in nbrs and source not in graph.vertices():
        raise MeshError(f"source {source} not in graph")
    # value per node: (hops, bottleneck quality, first hop)
    best: Dict[int, Tuple[int, float, int]] = {source: (0, float("inf"), source)}
    frontier = [source]
    hops = 0
    roles = graph.roles
    while frontier:
        hops += 1
        candidates: Dict[int, Tuple[float, int]] = {}
        for u in frontier:
            _, bottleneck, first = best[u]
            if u != source and roles.get(u) is not None and not ROLE_CAPS[roles[u]][0]:
                continue  # leaf-class nodes never relay
            for v, quality in sorted(nbrs.get(u, {}).items()):
                if v in best:
                    continue
                first_hop = v if u == source else first
                cand = (min(bottleneck, quality), first_hop)
                cur = candidates.get(v)
                if cur is None or (-cand[0], cand[1]) < (-cur[0], cur[1]):
                    candidates[v] = cand
        for v, (quality, first_hop) in candidates.items():
            best[v] = (hops, quality, first_hop)
        frontier = sorted(candidates)
    return {dst: info[2] for dst, info in best.items() if dst != source}


class NeighborWatch:
    """Counts consecutive missed expected transmissions per link; at the limit
    the edge is declared dead."""

    def __init__(self, miss_limit: int = BEACON_MISS_LIMIT):
        self.miss_limit = miss_limit
        self._misses: Dict[int, int] = {}

    def record_seen(self, neighbor: int) -> None:
        self._misses[neighbor] = 0

    def record_miss(self, neighbor: int) -> bool:
        """Returns True when the link has just crossed the miss limit."""
        count = self._misses.get(neighbor, 0) + 1
        self._misses[neighbor] = count
        return count == self.miss_limit

    def misses(self, neighbor: int) -> int:
        return self._misses.get(neighbor, 0)

    def forget(self, neighbor: int) -> None:
        self._misses.pop(neighbor, None)


def promote_leader(candidates: Sequence[Tuple[int, float]]) -> Optional[int]:
    """Deterministic leader election after a zone leader failure.

    `candidates` are (node id, uptime seconds) pairs of the zone's full nodes;
    the highest uptime wins, ties go to the lowest id.  Returns None when the
    zone has no eligible node (degraded state)."""
    if not candidates:
        return None
    return min(candidates, key=lambda c: (-c[1], c[0]))[0]


@dataclass
class ForwardAction:
    kind: str  # "deliver" | "relay" | "drop"
    next_hop: Optional[int] = None
    reason: Optional[str] = None


class DuplicateCache:
    """Remembers recently seen (origin, sequence) pairs per origin."""

    def __init__(self, window: int = 64):
        self.window = window
        self._seen: Dict[int, List[int]] = {}

    def seen(self, src: int, seq: int) -> bool:
        history = self._seen.setdefault(src, [])
        if seq in history:
            return True
        history.append(seq)
        if len(history) > self.window:
            del history[0]
        return False


def forward(
    packet: MeshPacket,
    node: int,
    routes: Dict[int, int],
    duplicates: DuplicateCache,
    may_forward: bool = True,
) -> ForwardAction:
    """Per-hop forwarding decision; relayed packets wait in the node's queue
    until its next transmit opportunity."""
    if packet.dst == node:
        if duplicates.seen(packet.src, packet.seq):
            return ForwardAction("drop", reason="duplicate")
        return ForwardAction("deliver")
    if duplicates.seen(packet.src, packet.seq):
        return ForwardAction("drop", reason="duplicate")
    if not may_forward:
        return ForwardAction("drop", reason="not-a-forwarder")
    if packet.ttl <= 1:
        return ForwardAction("drop", reason="ttl")
    next_hop = routes.get(packet.dst)
    if next_hop is None:
        return ForwardAction("drop", reason="unreachable")
    packet.ttl -= 1
    return ForwardAction("relay", next_hop=next_hop)


@dataclass
class Association:
    device: int
    zone: int
    leader: int
    granted: bool
    reason: str = "ok"


def associate_smart_device(
    device: NodeDescriptor,
    leader: NodeDescriptor,
    authenticated: bool,
    measured_distance_m: Optional[float],
    max_distance_m: float,
) -> Association:
    """Admission of a mobile smart device into a zone.

    Requires an authentication verdict from the security module and a valid
    proximity proof within the policy bound; a granted device exchanges mesh
    messages only inside its periodic ranging slots via the leader."""
    if not authenticated:
        return Association(device.id, leader.zone, leader.id, False, "authentication")
    if measured_distance_m is None:
        return Association(device.id, leader.zone, leader.id, False, "no-proof-of-proximity")
    if measured_distance_m > max_distance_m:
        return Association(device.id, leader.zone, leader.id, False, "proximity")
    return Association(device.id, leader.zone, leader.id, True)
