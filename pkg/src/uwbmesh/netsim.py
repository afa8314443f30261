"""Scenario execution: full protocol stacks running over the event kernel.

Per-superframe choreography in each zone (all actions local-clock driven):

* the zone leader broadcasts its beacon in its beacon slot (sync reference,
  roster, versioned neighbor digest), then floods fresh link-state
  advertisements inside the remainder of the owned slot;
* every associated member holds one granted ranging slot per superframe
  (round-robin over the roster) and runs an init/response/final ranging
  exchange with the leader inside it; a fixed sub-slot offset then carries
  one data frame: a leaf-class owner's uplink on even superframes or the
  leader's downlink on odd ones;
* forwarders additionally own one relay slot per superframe in the otherwise
  idle ranging region, used for queued mesh frames and topology floods;
* the trailing block of slots carries leader-to-leader traffic on the
  backbone channel (leaders and border nodes retune for the block, which
  also distributes the cross-zone time reference).

Mesh frames keep the full 116-byte payload for adaptation-layer bytes: the
MAC header's src/dst short addresses carry the mesh origin and final
destination and the second frame-control byte the TTL.  A node that overhears
a data frame relays it iff it is the next hop computed from the transmitter's
position in the shared link-state graph, which is deterministic and needs no
per-hop addressing bytes.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Set, Tuple

import numpy as np

from . import adaptation, mac, mesh, ranging, security
from .config import REMOTE_DST, FlowCfg, ScenarioConfig
from .engine import (
    PS_PER_MS,
    PS_PER_NS,
    PS_PER_S,
    PS_PER_US,
    RadioMedium,
    Reception,
    SimTime,
    Simulator,
)
from .phy import AttackRegistry, Frame, ImpairmentSignature, ToaPair, synthesize_cir

# frame types
FT_BEACON = 1
FT_RANGE_INIT = 2
FT_RANGE_RESP = 3
FT_RANGE_FINAL = 4
FT_DATA = 5
FT_LSA = 6
FT_LD_HELLO = 7

BACKBONE_CHANNEL = 250
PAN_ID = 0x5AD3
BROADCAST = 0xFFFF

DATA_SUBSLOT_US = 600.0      # owner uplink / leader downlink inside a granted slot
OVERFLOW_TX_US = (50.0, 280.0)
LD_TX_US = (250.0, 480.0, 710.0)
BEACON_EXTRA_US = (250.0, 480.0)
WATCH_MARGIN_US = 100.0
RANGE_VALID_SF = mac.SYNC_VALID_SUPERFRAMES

LEAF_CLASS = (mesh.LEAF, mesh.SMART_DEVICE)


def _pack_i64(*values: int) -> bytes:
    return b"".join(int(v).to_bytes(8, "big", signed=True) for v in values)


def _unpack_i64(data: bytes, count: int) -> Tuple[int, ...]:
    return tuple(
        int.from_bytes(data[8 * i : 8 * (i + 1)], "big", signed=True) for i in range(count)
    )


def pack_lsa(origin: int, version: int, neighbors: Dict[int, float]) -> bytes:
    items = sorted(neighbors.items())[:36]
    out = bytearray()
    out += origin.to_bytes(2, "big")
    out += (version & 0xFFFF).to_bytes(2, "big")
    out.append(len(items))
    for node, quality in items:
        out += node.to_bytes(2, "big")
        out.append(min(255, round(quality * 255)))
    return bytes(out)


def unpack_lsa(data: bytes) -> Tuple[int, int, Dict[int, float]]:
    origin = int.from_bytes(data[0:2], "big")
    version = int.from_bytes(data[2:4], "big")
    n = data[4]
    neighbors = {}
    off = 5
    for _ in range(n):
        node = int.from_bytes(data[off : off + 2], "big")
        neighbors[node] = data[off + 2] / 255.0
        off += 3
    return origin, version, neighbors


@dataclass
class ZoneState:
    zone: int
    leader: int
    channel: int
    beacon_slot: int
    ld_slot: int
    roster: List[int]  # associated members, sorted; excludes the leader


@dataclass
class SessionCtx:
    peer: int
    superframe: int
    t1_ps: float = 0.0
    done: bool = False


class NodeRuntime:
    def __init__(self, net: "Network", desc: mesh.NodeDescriptor, boot_uptime_s: float,
                 policy: security.KeyPolicy):
        self.net = net
        self.desc = desc
        self.id = desc.id
        self.policy = policy
        self.boot_uptime_s = boot_uptime_s
        self.alive = True
        drift_rng = np.random.default_rng((net.cfg.seed, desc.id, 1))
        drift = float(drift_rng.uniform(-net.cfg.max_drift_ppm, net.cfg.max_drift_ppm))
        self.clock = mac.LocalClock(0.0, drift, 0)
        self.rng = np.random.default_rng((net.cfg.seed, desc.id, 2))
        self.last_beacon_seq = -1
        self.synced_sf: Optional[int] = None
        self.leader_misses = 0
        self.zone_leader: int = 0
        # link state
        self.adjacency: Dict[int, float] = {}
        self.adjacency_dirty = False
        self.adv_version = 0
        self.topology = mesh.TopologyGraph(net.roles)
        self.watch = mesh.NeighborWatch()
        self.heard_this_sf: Set[int] = set()
        self._routes_cache: Dict[int, Dict[int, int]] = {}
        self._routes_generation = -1
        self._generation = 0
        # traffic
        self.ctrl_queue: deque = deque()
        self.data_queue: deque = deque()
        self.duplicates = mesh.DuplicateCache()
        self.reassembler = adaptation.Reassembler()
        self.seq_counter = 0
        self.session: Optional[SessionCtx] = None
        self.last_range: Dict[int, Tuple[float, int]] = {}
        self.buckets: Dict[int, security.TokenBucket] = {}
        self.registry = security.EnrollmentRegistry()
        self.rff_verdicts: Dict[int, bool] = {}

    # --- clock helpers ---------------------------------------------------

    def local_now(self) -> float:
        return self.clock.local_time(self.net.sim.now)

    def true_at_local(self, local_ps: float) -> SimTime:
        return max(self.clock.true_for_local(local_ps), self.net.sim.now)

    def current_superframe(self) -> int:
        return int(self.local_now() // mac.SUPERFRAME_PS)

    def synced(self, sf: int) -> bool:
        if self.desc.role == mesh.LEADER:
            return True
        return mac.is_synchronized(self.synced_sf, sf)

    # --- topology ----------------------------------------------------------

    def mark_heard(self, other: int, quality: float = 1.0) -> None:
        self.heard_this_sf.add(other)
        self.watch.record_seen(other)
        if other not in self.adjacency:
            role = self.net.roles.get(other)
            if role is None:
                return
            # adjacency only between forwarding-capable pairs, or with a
            # leaf-class far end serving as the last hop
            if not self.desc.may_forward and not mesh.ROLE_CAPS[role][0]:
                return
            self.adjacency[other] = quality
            self.adjacency_dirty = True

    def flush_advertisement(self) -> None:
        """Version-bump and flood batched adjacency changes (once per sf)."""
        if not self.adjacency_dirty:
            return
        self.adjacency_dirty = False
        self.adv_version += 1
        self.topology.apply_advertisement(self.id, self.adv_version, self.adjacency.items())
        self._generation += 1
        if self.desc.may_forward:
            self.ctrl_queue.append(pack_lsa(self.id, self.adv_version, self.adjacency))

    def ingest_lsa(self, payload: bytes) -> None:
        origin, version, neighbors = unpack_lsa(payload)
        if origin == self.id:
            return
        if self.topology.apply_advertisement(origin, version, neighbors.items()):
            self._generation += 1
            if self.desc.may_forward:
                self.ctrl_queue.append(payload)

    def sweep_neighbors(self, sf: int) -> None:
        """Per-superframe failure detection: every neighbor transmits at least
        once per superframe, so silence counts as a miss."""
        removed = []
        for neighbor in sorted(self.adjacency):
            if neighbor in self.heard_this_sf:
                continue
            if self.watch.record_miss(neighbor):
                removed.append(neighbor)
        for neighbor in removed:
            del self.adjacency[neighbor]
            self.watch.forget(neighbor)
            self.adjacency_dirty = True
            self.net.trace(self.id, "edge_down", f"peer={neighbor}")
            self.net.metrics["topology_changes"] += 1
        self.heard_this_sf = set()
        self.flush_advertisement()

    def routes_from(self, source: int) -> Dict[int, int]:
        if self._routes_generation != self._generation:
            self._routes_cache = {}
            self._routes_generation = self._generation
        table = self._routes_cache.get(source)
        if table is None:
            try:
                table = mesh.compute_routes(self.topology, source)
            except mesh.MeshError:
                table = {}
            self._routes_cache[source] = table
        return table

    def routes(self) -> Dict[int, int]:
        return self.routes_from(self.id)


class Network:
    """Builds every runtime object from a ScenarioConfig and runs it."""

    def __init__(self, cfg: ScenarioConfig, trace_fh=None):
        self.cfg = cfg
        self.sim = Simulator(trace=trace_fh)
        self.medium = RadioMedium(
            self.sim,
            max_range_m=cfg.max_range_m,
            datarate_bps=cfg.datarate_mbps * 1e6,
            preamble_us=cfg.preamble_us,
        )
        self.roles: Dict[int, str] = {n.id: n.role for n in cfg.nodes}
        self.positions = {n.id: n.position for n in cfg.nodes}
        self.attacks = AttackRegistry(known_nodes=[n.id for n in cfg.nodes])
        self.metrics: Dict[str, Any] = {
            "superframes": 0,
            "collisions": 0,
            "frames_tx": 0,
            "frames_delivered": 0,
            "datagrams_offered": 0,
            "datagrams_delivered": 0,
            "datagrams_egressed": 0,
            "sessions_started": 0,
            "sessions_ok": 0,
            "sessions_invalidated": 0,
            "sessions_timeout": 0,
            "attack_detections": 0,
            "policy_denials": {"proximity": 0, "rate": 0, "rff": 0, "no-proof-of-proximity": 0},
            "slot_violations": 0,
            "promotions": 0,
            "degraded_zones": 0,
            "topology_changes": 0,
            "assoc_rejections": 0,
            "drops": {"ttl": 0, "unreachable": 0, "duplicate": 0, "not-a-forwarder": 0},
            "ranging_err_mm_sum": 0.0,
            "ranging_err_mm_max": 0.0,
        }
        self.nodes: Dict[int, NodeRuntime] = {}
        self.zones: Dict[int, ZoneState] = {}
        self._sent_payloads: Dict[Tuple[int, int], Tuple[bytes, FlowCfg]] = {}
        self._flow_tags: Dict[int, int] = {}
        self._build()

    # --- construction ------------------------------------------------------

    def _policy_for(self, overrides: Optional[Dict[str, Any]]) -> security.KeyPolicy:
        merged = dict(self.cfg.policy)
        if overrides:
            merged.update(overrides)
        return security.KeyPolicy(
            max_distance_m=float(merged.get("max_distance_m", 10.0)),
            max_frames_per_superframe=int(merged.get("max_frames_per_superframe", 100)),
            rff_required=bool(merged.get("rff_required", False)),
            rff_threshold=float(merged.get("rff_threshold", security.DEFAULT_RFF_THRESHOLD)),
        )

    def _build(self) -> None:
        cfg = self.cfg
        leaders = sorted(n.id for n in cfg.nodes if n.role == mesh.LEADER)
        self.schedule = mac.build_schedule(leaders, cfg.slot_length_us)
        self.slot_ps = self.schedule.slot_length_ps
        n_slots = self.schedule.n_slots
        for rank, leader_id in enumerate(leaders):
            zone = next(n.zone for n in cfg.nodes if n.id == leader_id)
            channel = 0 if cfg.shared_channel else zone
            self.zones[zone] = ZoneState(
                zone, leader_id, channel, rank, n_slots - len(leaders) + rank, []
            )

        for n in cfg.nodes:
            desc = mesh.NodeDescriptor(n.id, n.role, n.position, n.zone)
            node = NodeRuntime(self, desc, n.boot_uptime_s, self._policy_for(n.policy))
            node.zone_leader = self.zones[n.zone].leader
            self.nodes[n.id] = node
            self.medium.set_position(n.id, n.position)
            self.medium.set_channel(n.id, self.zones[n.zone].channel)
            self.sim.register(n.id, self._dispatch)

        for zone in self.zones.values():
            zone.roster = sorted(
                n.id for n in cfg.nodes
                if n.zone == zone.zone and n.id != zone.leader and n.role != mesh.SMART_DEVICE
            )
        self._associate_smart_devices()

        for zone in self.zones.values():
            leader = self.nodes[zone.leader]
            t = leader.true_at_local(zone.beacon_slot * self.slot_ps + self.guard_ps())
            self.sim.schedule_at(t, zone.leader, "beacon")
        for node in self.nodes.values():
            if node.desc.role != mesh.LEADER and node.alive:
                zone = self.zones[node.desc.zone]
                local = (zone.beacon_slot + 1) * self.slot_ps + WATCH_MARGIN_US * PS_PER_US
                self.sim.schedule_at(node.true_at_local(local), node.id, "watch", 0)
        for i, flow in enumerate(cfg.flows):
            self.sim.schedule_at(round(flow.start_ms * PS_PER_MS), flow.src, "flow", i)
        for failure in cfg.failures:
            self.sim.schedule_at(round(failure.at_ms * PS_PER_MS), failure.node, "kill")
        for attack in cfg.attacks:
            self.attacks.inject(
                attack.kind, attack.magnitude_ns, attack.link,
                start_ps=round(attack.start_ms * PS_PER_MS),
            )

    def _associate_smart_devices(self) -> None:
        """Bootstrap admission: enroll the device fingerprint at the zone
        leader, verify a fresh capture, prove proximity with a ranging
        exchange, then grant periodic ranging slots."""
        for n in sorted(self.cfg.nodes, key=lambda n: n.id):
            if n.role != mesh.SMART_DEVICE:
                continue
            node = self.nodes[n.id]
            zone = self.zones[n.zone]
            leader = self.nodes[zone.leader]
            distance = max(math.dist(n.position, leader.desc.position), 0.05)
            signature = ImpairmentSignature.from_seed(self.cfg.seed, n.id)
            embeddings = [
                security.extract_embedding(
                    security.preprocess_cir(
                        synthesize_cir(
                            distance, signature, noise_snr_db=25.0,
                            seed=(self.cfg.seed * 1000003 + n.id * 101 + k),
                        )
                    )
                )
                for k in range(security.MIN_ENROLL_SAMPLES + 1)
            ]
            record = security.enroll(n.id, embeddings[:-1])
            leader.registry.add(record)
            accepted, _ = security.reidentify(embeddings[-1], record, node.policy.rff_threshold)
            leader.rff_verdicts[n.id] = accepted
            boot = ranging.run_session(
                distance, node.clock, leader.clock,
                initiator=n.id, responder=zone.leader,
                tau_ns=self.cfg.tau_ns, rng=node.rng,
            )
            measured = boot.result.distance_m if boot.result and boot.result.valid else None
            assoc = mesh.associate_smart_device(
                node.desc, leader.desc, accepted, measured, node.policy.max_distance_m
            )
            if assoc.granted:
                zone.roster.append(n.id)
                zone.roster.sort()
                node.last_range[zone.leader] = (measured, 0)
                leader.last_range[n.id] = (measured, 0)
            else:
                node.alive = False  # never granted airtime
                self.metrics["assoc_rejections"] += 1
                self.trace(zone.leader, "assoc_reject", f"device={n.id} reason={assoc.reason}")

    # --- helpers -------------------------------------------------------------

    def guard_ps(self) -> float:
        return self.cfg.guard_us * PS_PER_US

    def trace(self, node: int, kind: str, details: str = "") -> None:
        self.sim.trace(node, kind, details)

    def zone_of(self, node_id: int) -> ZoneState:
        return self.zones[self.nodes[node_id].desc.zone]

    def measure(self, node: NodeRuntime, peer: int, t_air_start: SimTime) -> ToaPair:
        disp = self.attacks.displacement_ps((node.id, peer), self.sim.now)
        return ranging.measure_arrival(
            node.clock, t_air_start, disp, self.cfg.toa_sigma_ns, node.rng
        )

    def _next_seq(self, node: NodeRuntime) -> int:
        node.seq_counter = (node.seq_counter + 1) % 256
        return node.seq_counter

    def _tx(self, node: NodeRuntime, frame: Frame, channel: Optional[int] = None) -> None:
        if not node.alive:
            return
        self.medium.transmit(node.id, frame, channel=channel)
        self.metrics["frames_tx"] += 1

    # --- event dispatch ----------------------------------------------------------

    def _dispatch(self, sim: Simulator, event) -> None:
        node = self.nodes[event.target]
        kind = event.kind
        if kind == "kill":
            node.alive = False
            self.trace(node.id, "killed")
            return
        if not node.alive:
            return
        if kind == "rx":
            self._on_rx(node, event.payload)
        elif kind == "beacon":
            self._on_beacon_slot(node)
        elif kind == "beacon_extra":
            self._tx_ctrl(node, limit=1)
        elif kind == "ld":
            self._on_ld_slot(node)
        elif kind == "ld_tx":
            self._on_ld_tx(node)
        elif kind == "tune":
            self.medium.set_channel(node.id, event.payload)
        elif kind == "slot_ranging":
            self._on_slot_ranging(node, event.payload)
        elif kind == "slot_data":
            self._send_queued(node)
        elif kind == "overflow":
            self._on_overflow(node)
        elif kind == "resp_tx":
            self._on_resp_tx(node, event.payload)
        elif kind == "final_tx":
            self._on_final_tx(node, event.payload)
        elif kind == "downlink":
            self._on_downlink(node, event.payload)
        elif kind == "watch":
            self._on_watch(node, event.payload)
        elif kind == "flow":
            self._on_flow(node, event.payload)

    # --- leader side ----------------------------------------------------------

    def _on_beacon_slot(self, node: NodeRuntime) -> None:
        zone = self.zone_of(node.id)
        if zone.leader != node.id:
            return
        sf = node.current_superframe()
        node.sweep_neighbors(sf)
        self.metrics["superframes"] = max(self.metrics["superframes"], sf + 1)
        beacon = mac.Beacon(
            leader=node.id,
            seq=sf,
            timestamp_ps=round(node.local_now()),
            position=node.desc.position,
            roster=tuple(zone.roster),
            neighbors=tuple(sorted(node.adjacency.items())),
            digest_version=node.adv_version,
        )
        frame = Frame(FT_BEACON, self._next_seq(node), PAN_ID, BROADCAST, node.id,
                      beacon.to_payload())
        self._tx(node, frame)
        self.trace(node.id, "beacon_tx", f"seq={sf}")
        # flood fresh advertisements right after the beacon, inside the owned slot
        slot_start = sf * mac.SUPERFRAME_PS + zone.beacon_slot * self.slot_ps
        for i, off in enumerate(BEACON_EXTRA_US):
            if i < len(node.ctrl_queue):
                self.sim.schedule_at(
                    node.true_at_local(slot_start + off * PS_PER_US), node.id, "beacon_extra"
                )
        # backbone block: retune, say hello in the owned leader-data slot
        block_start = sf * mac.SUPERFRAME_PS \
            + (self.schedule.n_slots - len(self.zones)) * self.slot_ps
        self.sim.schedule_at(node.true_at_local(block_start), node.id, "tune", BACKBONE_CHANNEL)
        ld_start = sf * mac.SUPERFRAME_PS + zone.ld_slot * self.slot_ps
        self.sim.schedule_at(node.true_at_local(ld_start + self.guard_ps()), node.id, "ld")
        self.sim.schedule_at(
            node.true_at_local((sf + 1) * mac.SUPERFRAME_PS - PS_PER_US),
            node.id, "tune", zone.channel,
        )
        # odd superframes: downlink sub-slot toward each member with queued traffic
        if sf % 2 == 1 and zone.roster:
            for member in zone.roster:
                frame_down = self._pick_downlink(node, member)
                if frame_down is not None:
                    rank = zone.roster.index(member)
                    slot = len(self.zones) + ((rank + sf) % len(zone.roster))
                    t = sf * mac.SUPERFRAME_PS + slot * self.slot_ps \
                        + DATA_SUBSLOT_US * PS_PER_US
                    self.sim.schedule_at(node.true_at_local(t), node.id, "downlink", frame_down)
        nxt = (sf + 1) * mac.SUPERFRAME_PS + zone.beacon_slot * self.slot_ps + self.guard_ps()
        self.sim.schedule_at(node.true_at_local(nxt), node.id, "beacon")

    def _pick_downlink(self, node: NodeRuntime, member: int) -> Optional[Frame]:
        routes = node.routes()
        for i, frame in enumerate(node.data_queue):
            hop = member if frame.dst == member else routes.get(frame.dst)
            if hop == member:
                del node.data_queue[i]
                return frame
        return None

    def _on_ld_slot(self, node: NodeRuntime) -> None:
        zone = self.zone_of(node.id)
        if zone.leader != node.id:
            return
        sf = node.current_superframe()
        hello = _pack_i64(round(node.local_now())) + pack_lsa(
            node.id, node.adv_version, node.adjacency
        )
        frame = Frame(FT_LD_HELLO, self._next_seq(node), PAN_ID, BROADCAST, node.id, hello)
        self._tx(node, frame, channel=BACKBONE_CHANNEL)
        ld_start = sf * mac.SUPERFRAME_PS + zone.ld_slot * self.slot_ps
        for off in LD_TX_US:
            self.sim.schedule_at(
                node.true_at_local(ld_start + off * PS_PER_US), node.id, "ld_tx"
            )

    def _on_ld_tx(self, node: NodeRuntime) -> None:
        if node.ctrl_queue:
            self._tx_ctrl(node, limit=1, channel=BACKBONE_CHANNEL)
            return
        routes = node.routes()
        backbone_peers = {z.leader for z in self.zones.values()} | {
            i for i, r in self.roles.items() if r == mesh.BORDER
        }
        for i, frame in enumerate(node.data_queue):
            hop = frame.dst if frame.dst in backbone_peers else routes.get(frame.dst)
            if hop in backbone_peers and hop != node.id:
                del node.data_queue[i]
                self._tx(node, frame, channel=BACKBONE_CHANNEL)
                self.trace(node.id, "data_tx",
                           f"origin={frame.src} dst={frame.dst} seq={frame.seq}")
                return

    def _tx_ctrl(self, node: NodeRuntime, limit: int, channel: Optional[int] = None) -> None:
        for _ in range(min(limit, len(node.ctrl_queue))):
            payload = node.ctrl_queue.popleft()
            frame = Frame(FT_LSA, self._next_seq(node), PAN_ID, BROADCAST, node.id, payload,
                          ttl=mesh.DEFAULT_TTL)
            self._tx(node, frame, channel=channel)

    # --- member side -------------------------------------------------------------

    def _on_watch(self, node: NodeRuntime, expected_sf: int) -> None:
        zone = self.zone_of(node.id)
        node.sweep_neighbors(expected_sf)
        if node.last_beacon_seq < expected_sf:
            node.leader_misses += 1
            if node.leader_misses == mesh.BEACON_MISS_LIMIT:
                self._leader_failed(node, expected_sf)
        if node.desc.role == mesh.LEADER:
            return  # promoted: the beacon chain takes over
        if node.desc.role == mesh.BORDER:
            # border nodes join the backbone block to reach remote zones
            sf = expected_sf
            block_start = sf * mac.SUPERFRAME_PS \
                + (self.schedule.n_slots - len(self.zones)) * self.slot_ps
            self.sim.schedule_at(node.true_at_local(block_start), node.id, "tune",
                                 BACKBONE_CHANNEL)
            self.sim.schedule_at(
                node.true_at_local((sf + 1) * mac.SUPERFRAME_PS - PS_PER_US),
                node.id, "tune", zone.channel,
            )
        local = (expected_sf + 1) * mac.SUPERFRAME_PS + (zone.beacon_slot + 1) * self.slot_ps \
            + WATCH_MARGIN_US * PS_PER_US
        self.sim.schedule_at(node.true_at_local(local), node.id, "watch", expected_sf + 1)

    def _leader_failed(self, node: NodeRuntime, sf: int) -> None:
        zone = self.zone_of(node.id)
        dead = zone.leader
        if dead in node.adjacency:
            del node.adjacency[dead]
            node.adjacency_dirty = True
            node.flush_advertisement()
            self.trace(node.id, "edge_down", f"peer={dead}")
            self.metrics["topology_changes"] += 1
        candidates = [
            (m, self.nodes[m].boot_uptime_s + self.sim.now / PS_PER_S)
            for m in zone.roster
            if self.roles[m] == mesh.FULL and self.nodes[m].alive
        ]
        winner = mesh.promote_leader(candidates)
        if winner is None:
            self.trace(node.id, "zone_degraded", f"zone={zone.zone}")
            self.metrics["degraded_zones"] += 1
            return
        if winner != node.id:
            return
        # assume the failed leader's beacon and data slots from the next superframe
        zone.leader = node.id
        zone.roster = [m for m in zone.roster if m != node.id]
        node.desc.role = mesh.LEADER
        self.roles[node.id] = mesh.LEADER
        node.zone_leader = node.id
        self.metrics["promotions"] += 1
        self.trace(node.id, "promoted", f"zone={zone.zone}")
        nxt = (sf + 1) * mac.SUPERFRAME_PS + zone.beacon_slot * self.slot_ps + self.guard_ps()
        self.sim.schedule_at(node.true_at_local(nxt), node.id, "beacon")

    def _on_beacon_rx(self, node: NodeRuntime, frame: Frame, reception: Reception) -> None:
        beacon = mac.Beacon.from_payload(frame.payload)
        if self.nodes[beacon.leader].desc.zone != node.desc.zone:
            return
        zone = self.zone_of(node.id)
        if beacon.leader != zone.leader:
            return
        node.zone_leader = beacon.leader
        distance = node.last_range.get(beacon.leader, (0.0, -1))[0]
        node.clock, accepted = mac.sync_from_beacon(
            node.clock, beacon, reception.t_air_start, distance,
            last_seen_seq=node.last_beacon_seq if node.last_beacon_seq >= 0 else None,
        )
        if not accepted:
            return
        node.last_beacon_seq = beacon.seq
        node.leader_misses = 0
        node.synced_sf = beacon.seq
        node.ingest_lsa(pack_lsa(beacon.leader, beacon.digest_version, dict(beacon.neighbors)))
        sf = beacon.seq
        roster = list(beacon.roster)
        if node.id not in roster:
            return
        rank = roster.index(node.id)
        slot = len(self.zones) + ((rank + sf) % len(roster))
        slot_start = sf * mac.SUPERFRAME_PS + slot * self.slot_ps
        self.sim.schedule_at(
            node.true_at_local(slot_start + self.guard_ps()), node.id, "slot_ranging", sf
        )
        if sf % 2 == 0 and node.desc.role in LEAF_CLASS and node.data_queue:
            self.sim.schedule_at(
                node.true_at_local(slot_start + DATA_SUBSLOT_US * PS_PER_US),
                node.id, "slot_data",
            )
        if node.desc.may_forward:
            forwarders = [m for m in roster if mesh.ROLE_CAPS[self.roles[m]][0]]
            if node.id in forwarders:
                oslot = len(self.zones) + len(roster) + forwarders.index(node.id)
                ostart = sf * mac.SUPERFRAME_PS + oslot * self.slot_ps
                self.sim.schedule_at(
                    node.true_at_local(ostart + self.guard_ps()), node.id, "overflow"
                )

    def _on_slot_ranging(self, node: NodeRuntime, sf: int) -> None:
        if not node.synced(sf):
            return
        if node.session is not None and not node.session.done:
            node.session.done = True
            self.metrics["sessions_timeout"] += 1
            self.trace(node.id, "range_timeout", f"peer={node.session.peer}")
        peer = node.zone_leader
        node.session = SessionCtx(peer, sf, t1_ps=node.clock.local_time(self.sim.now))
        frame = Frame(FT_RANGE_INIT, self._next_seq(node), PAN_ID, peer, node.id)
        self._tx(node, frame)
        self.metrics["sessions_started"] += 1

    def _on_overflow(self, node: NodeRuntime) -> None:
        if node.ctrl_queue:
            self._tx_ctrl(node, limit=1)
            if node.ctrl_queue or node.data_queue:
                delta = (OVERFLOW_TX_US[1] - OVERFLOW_TX_US[0]) * PS_PER_US
                self.sim.schedule_at(self.sim.now + round(delta), node.id, "slot_data")
            return
        self._send_queued(node)

    def _send_queued(self, node: NodeRuntime) -> None:
        if node.ctrl_queue:
            self._tx_ctrl(node, limit=1)
            return
        if not node.data_queue:
            return
        routes = node.routes()
        for i, frame in enumerate(node.data_queue):
            hop = routes.get(frame.dst)
            if hop is None:
                del node.data_queue[i]
                self.metrics["drops"]["unreachable"] += 1
                self.trace(node.id, "drop",
                           f"origin={frame.src} seq={frame.seq} reason=unreachable")
                return
            del node.data_queue[i]
            self._tx(node, frame)
            self.trace(node.id, "data_tx", f"origin={frame.src} dst={frame.dst} seq={frame.seq}")
            return

    def _on_downlink(self, node: NodeRuntime, frame: Frame) -> None:
        self._tx(node, frame)
        self.trace(node.id, "data_tx", f"origin={frame.src} dst={frame.dst} seq={frame.seq}")

    # --- ranging exchange ----------------------------------------------------------

    def _on_resp_tx(self, node: NodeRuntime, payload: Tuple[int, float, float]) -> None:
        peer, t2_ps, t3_local = payload
        frame = Frame(
            FT_RANGE_RESP, self._next_seq(node), PAN_ID, peer, node.id,
            _pack_i64(round(t2_ps), round(t3_local)),
        )
        self._tx(node, frame)

    def _on_final_tx(self, node: NodeRuntime, payload: Tuple[int, int]) -> None:
        peer, distance_um = payload
        frame = Frame(
            FT_RANGE_FINAL, self._next_seq(node), PAN_ID, peer, node.id,
            _pack_i64(distance_um),
        )
        self._tx(node, frame)

    def _clock_ratio(self, node: NodeRuntime, peer: NodeRuntime) -> float:
        return ranging.measured_clock_ratio(
            node.clock, peer.clock, self.cfg.cfo_sigma_ppm, node.rng
        )

    # --- reception -------------------------------------------------------------------

    def _on_rx(self, node: NodeRuntime, reception: Reception) -> None:
        received = self.medium.resolve(node.id, reception)
        if received is None:
            return
        if received.corrupted:
            self.metrics["collisions"] += 1
            self.trace(node.id, "frame_corrupt", f"from={received.sender}")
            return
        frame: Frame = received.frame
        sender = received.sender
        self.metrics["frames_delivered"] += 1
        # leaf-class nodes sleep outside beacon slots and their own exchanges
        if node.desc.role in LEAF_CLASS and frame.frame_type != FT_BEACON \
                and frame.dst != node.id:
            return
        node.mark_heard(sender)

        ftype = frame.frame_type
        if ftype == FT_BEACON:
            self._on_beacon_rx(node, frame, reception)
        elif ftype == FT_LD_HELLO:
            self._on_ld_hello(node, frame, reception)
        elif ftype == FT_RANGE_INIT and frame.dst == node.id:
            self._on_range_init(node, frame, reception)
        elif ftype == FT_RANGE_RESP and frame.dst == node.id:
            self._on_range_resp(node, frame, reception)
        elif ftype == FT_RANGE_FINAL and frame.dst == node.id:
            self._on_range_final(node, frame, reception)
        elif ftype == FT_LSA:
            node.ingest_lsa(frame.payload)
        elif ftype == FT_DATA:
            self._on_data(node, frame, sender)

    def _on_ld_hello(self, node: NodeRuntime, frame: Frame, reception: Reception) -> None:
        ts = _unpack_i64(frame.payload, 1)[0]
        node.ingest_lsa(frame.payload[8:])
        # leaders (and borders) track the lowest-id live leader as the
        # cross-zone time reference
        if node.desc.role not in (mesh.LEADER, mesh.BORDER):
            return
        alive_leaders = [z.leader for z in self.zones.values() if self.nodes[z.leader].alive]
        if not alive_leaders or frame.src != min(alive_leaders) or frame.src == node.id:
            return
        distance = math.dist(self.positions[node.id], self.positions[frame.src])
        reference = mac.Beacon(frame.src, 0, ts, (0.0, 0.0, 0.0))
        node.clock, _ = mac.sync_from_beacon(node.clock, reference,
                                             reception.t_air_start, distance)

    def _granted_slot(self, zone: ZoneState, member: int, sf: int) -> Optional[int]:
        if member not in zone.roster:
            return None
        rank = zone.roster.index(member)
        return len(self.zones) + ((rank + sf) % len(zone.roster))

    def _smart_in_slot(self, node: NodeRuntime, sender: int) -> bool:
        zone = self.zone_of(node.id)
        sf = node.current_superframe()
        slot, _ = mac.slot_at(self.schedule, node.local_now())
        return self._granted_slot(zone, sender, sf) == slot.index

    def _on_range_init(self, node: NodeRuntime, frame: Frame, reception: Reception) -> None:
        sender = frame.src
        pair = self.measure(node, sender, reception.t_air_start)
        if not ranging.check_toa_consistency(pair, self.cfg.tau_ns):
            self._detect_attack(node, sender, pair, "init")
            return
        if self.roles.get(sender) == mesh.SMART_DEVICE and not self._smart_in_slot(node, sender):
            self.metrics["slot_violations"] += 1
            self.trace(node.id, "slot_violation", f"device={sender}")
            return
        t2 = pair.toa_sts
        t3_local = t2 + self.cfg.reply_delay_us * PS_PER_US
        t3_true = node.clock.true_for_local(t3_local)
        self.sim.schedule_at(max(t3_true, self.sim.now), node.id, "resp_tx",
                             (sender, t2, t3_local))

    def _on_range_resp(self, node: NodeRuntime, frame: Frame, reception: Reception) -> None:
        if node.session is None or node.session.peer != frame.src or node.session.done:
            return
        pair = self.measure(node, frame.src, reception.t_air_start)
        if not ranging.check_toa_consistency(pair, self.cfg.tau_ns):
            self._detect_attack(node, frame.src, pair, "response")
            node.session.done = True
            self.metrics["sessions_invalidated"] += 1
            return
        t2_ps, t3_ps = _unpack_i64(frame.payload, 2)
        t4_ps = pair.toa_sts
        ratio = self._clock_ratio(node, self.nodes[frame.src])
        tof_ns = ((t4_ps - node.session.t1_ps) - (t3_ps - t2_ps) * ratio) / 2.0 / PS_PER_NS
        node.session.done = True
        if tof_ns <= 0:
            self.metrics["sessions_invalidated"] += 1
            self.trace(node.id, "range_invalid", f"peer={frame.src} reason=non-causal")
            return
        distance = ranging.tof_to_distance_m(tof_ns)
        node.last_range[frame.src] = (distance, node.session.superframe)
        t_final = node.clock.true_for_local(t4_ps + self.cfg.reply_delay_us * PS_PER_US)
        self.sim.schedule_at(max(t_final, self.sim.now), node.id, "final_tx",
                             (frame.src, round(distance * 1e6)))

    def _on_range_final(self, node: NodeRuntime, frame: Frame, reception: Reception) -> None:
        sender = frame.src
        pair = self.measure(node, sender, reception.t_air_start)
        if not ranging.check_toa_consistency(pair, self.cfg.tau_ns):
            self._detect_attack(node, sender, pair, "final")
            return
        distance = _unpack_i64(frame.payload, 1)[0] / 1e6
        sf = node.current_superframe()
        node.last_range[sender] = (distance, sf)
        self.metrics["sessions_ok"] += 1
        err_mm = abs(distance - math.dist(self.positions[node.id], self.positions[sender])) * 1e3
        self.metrics["ranging_err_mm_sum"] += err_mm
        self.metrics["ranging_err_mm_max"] = max(self.metrics["ranging_err_mm_max"], err_mm)
        self.trace(node.id, "range_ok", f"peer={sender} dist_um={round(distance * 1e6)}")

    def _detect_attack(self, node: NodeRuntime, peer: int, pair: ToaPair, msg: str) -> None:
        self.metrics["attack_detections"] += 1
        self.trace(
            node.id, "toa_mismatch",
            f"peer={peer} msg={msg} delta_ps={round(pair.discrepancy_ps)}",
        )

    # --- mesh data ------------------------------------------------------------------

    def _on_data(self, node: NodeRuntime, frame: Frame, transmitter: int) -> None:
        if node.desc.role == mesh.LEADER and transmitter in self.zone_of(node.id).roster:
            if self.roles.get(transmitter) == mesh.SMART_DEVICE \
                    and not self._smart_in_slot(node, transmitter):
                self.metrics["slot_violations"] += 1
                self.trace(node.id, "slot_violation", f"device={transmitter}")
                return
            if not self._policy_allows(node, transmitter):
                return
        packet = mesh.MeshPacket(frame.src, frame.dst, frame.seq, frame.payload, frame.ttl)
        if packet.dst == node.id:
            action = mesh.forward(packet, node.id, {}, node.duplicates, node.desc.may_forward)
            if action.kind == "deliver":
                self._deliver(node, packet)
            else:
                self.metrics["drops"][action.reason] += 1
            return
        if not node.desc.may_forward:
            return
        # relay iff this node is the next hop on the path from the transmitter
        if node.routes_from(transmitter).get(packet.dst) != node.id:
            return
        action = mesh.forward(packet, node.id, node.routes(), node.duplicates, True)
        if action.kind == "relay":
            relayed = Frame(FT_DATA, packet.seq, PAN_ID, packet.dst, packet.src,
                            packet.payload, ttl=packet.ttl)
            node.data_queue.append(relayed)
            self.trace(node.id, "relay", f"origin={packet.src} dst={packet.dst} seq={packet.seq}")
        elif action.kind == "drop":
            self.metrics["drops"][action.reason] += 1
            self.trace(node.id, "drop",
                       f"origin={packet.src} seq={packet.seq} reason={action.reason}")

    def _policy_allows(self, leader: NodeRuntime, member: int) -> bool:
        sf = leader.current_superframe()
        policy = self.nodes[member].policy
        entry = leader.last_range.get(member)
        distance = None
        if entry is not None and sf - entry[1] <= RANGE_VALID_SF:
            distance = entry[0]
        bucket = leader.buckets.get(member)
        if bucket is None:
            bucket = leader.buckets[member] = security.TokenBucket(
                policy.max_frames_per_superframe
            )
        bucket.refill(sf)
        used = policy.max_frames_per_superframe - bucket.tokens
        verdict = leader.rff_verdicts.get(member)
        allowed, reason = security.enforce_policy(policy, distance, used, verdict)
        if allowed:
            bucket.try_consume(sf)
            return True
        self.metrics["policy_denials"][reason] += 1
        self.trace(leader.id, "policy_deny", f"peer={member} reason={reason}")
        return False

    def _deliver(self, node: NodeRuntime, packet: mesh.MeshPacket) -> None:
        unit = packet.payload
        if adaptation.is_fragment(unit):
            datagram = node.reassembler.feed(packet.src, unit, node.current_superframe())
            node.reassembler.sweep(node.current_superframe())
        else:
            datagram = unit
        if datagram is None:
            return
        try:
            header, payload = adaptation.decompress_bytes(datagram, packet.src, node.id)
        except adaptation.AdaptationError:
            self.trace(node.id, "decode_error", f"origin={packet.src}")
            return
        for key in sorted(self._sent_payloads):
            origin, tag = key
            sent, flow = self._sent_payloads[key]
            if origin == packet.src and sent == payload:
                del self._sent_payloads[key]
                self.metrics["datagrams_delivered"] += 1
                if flow.dst == REMOTE_DST:
                    self.metrics["datagrams_egressed"] += 1
                    self.trace(node.id, "egress", f"origin={origin} bytes={len(payload)}")
                else:
                    self.trace(node.id, "datagram", f"origin={origin} bytes={len(payload)}")
                return

    def _on_flow(self, node: NodeRuntime, flow_index: int) -> None:
        flow = self.cfg.flows[flow_index]
        dst = self._flow_dst(flow)
        tag = self._flow_tags.get(flow.src, 0)
        self._flow_tags[flow.src] = (tag + 1) % 0x10000
        payload_rng = np.random.default_rng((self.cfg.seed, flow.src, 3, tag))
        payload = payload_rng.integers(0, 256, flow.size_bytes, dtype=np.uint8).tobytes()
        header = adaptation.Ipv6Header(
            traffic_class=0, flow_label=0, payload_length=len(payload),
            next_header=adaptation.NEXT_HEADER_UDP, hop_limit=64,
            src=adaptation.link_local_from_mac(flow.src),
            dst=adaptation.link_local_from_mac(dst),
        )
        datagram = adaptation.compress(header, flow.src, dst).to_bytes() + payload
        self.metrics["datagrams_offered"] += 1
        self._sent_payloads[(flow.src, tag)] = (payload, flow)
        for unit in adaptation.fragment(datagram, tag):
            frame = Frame(FT_DATA, self._next_seq(node), PAN_ID, dst, node.id, unit,
                          ttl=mesh.DEFAULT_TTL)
            node.data_queue.append(frame)
        nxt = self.sim.now + round(flow.period_ms * PS_PER_MS)
        if nxt < round(self.cfg.duration_s * PS_PER_S):
            self.sim.schedule_at(nxt, node.id, "flow", flow_index)

    def _flow_dst(self, flow: FlowCfg) -> int:
        if flow.dst == REMOTE_DST:
            return min(i for i, r in self.roles.items() if r == mesh.BORDER)
        return flow.dst

    # --- run -----------------------------------------------------------------------

    def run(self) -> Dict[str, Any]:
        duration_ps = round(self.cfg.duration_s * PS_PER_S)
        stats = self.sim.run_until(duration_ps)
        m = dict(self.metrics)
        m["events"] = stats.events_processed
        m["frames_corrupted"] = stats.frames_corrupted
        m["per_node_delivered"] = {str(k): v for k, v in sorted(stats.frames_delivered.items())}
        offered = m["datagrams_offered"]
        m["delivery_ratio"] = (m["datagrams_delivered"] / offered) if offered else None
        ok = m["sessions_ok"]
        m["ranging_err_mm_mean"] = (m.pop("ranging_err_mm_sum") / ok) if ok else 0.0
        return m


def metrics_to_json(metrics: Dict[str, Any]) -> str:
    return json.dumps(metrics, sort_keys=True, indent=2) + "\n"
