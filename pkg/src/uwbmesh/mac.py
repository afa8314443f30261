"""TDMA superframe construction, slot lookup and beacon clock synchronization.

The 100 ms superframe is partitioned into beacon slots (one per zone leader,
ordered by node id), ranging slots, and one collision-free data-exchange slot
per leader at the end.  Local clocks drift; beacons resynchronize them once
per superframe, keeping worst-case error far below the slot guard time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

from .engine import PS_PER_MS, PS_PER_US, SimTime, propagation_delay_ps
from .phy import MAX_PAYLOAD_BYTES

SUPERFRAME_MS = 100
SUPERFRAME_PS = SUPERFRAME_MS * PS_PER_MS

DEFAULT_SLOT_LENGTH_US = 1000
DEFAULT_GUARD_US = 50.0
SYNC_VALID_SUPERFRAMES = 5

BEACON = "beacon"
RANGING = "ranging"
LEADER_DATA = "leader_data"


class ScheduleError(Exception):
    pass


@dataclass(frozen=True)
class SlotAssignment:
    kind: str
    owner: Optional[int]  # None for open ranging slots
    index: int


@dataclass(frozen=True)
class SuperframeSchedule:
    slot_length_us: int
    slots: Tuple[SlotAssignment, ...]

    @property
    def slot_length_ps(self) -> SimTime:
        return self.slot_length_us * PS_PER_US

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    def dump(self) -> str:
        """Text table (index, kind, owner) for debugging."""
        lines = ["index kind owner"]
        for slot in self.slots:
            owner = "-" if slot.owner is None else str(slot.owner)
            lines.append(f"{slot.index} {slot.kind} {owner}")
        return "\n".join(lines) + "\n"


def build_schedule(
    leaders: Sequence[int],
    slot_length_us: int = DEFAULT_SLOT_LENGTH_US,
) -> SuperframeSchedule:
    """Lay out one superframe: |leaders| beacon slots, then ranging slots,
    then one leader-data slot per leader.  Leaders are ordered by node id."""
    if not leaders:
        raise ScheduleError("at least one leader required")
    superframe_us = SUPERFRAME_MS * 1000
    if slot_length_us <= 0 or superframe_us % slot_length_us != 0:
        raise ScheduleError(f"slot length {slot_length_us} us does not divide {superframe_us} us")
    n_slots = superframe_us // slot_length_us
    ordered = sorted(leaders)
    if len(ordered) != len(set(ordered)):
        raise ScheduleError("duplicate leader id")
    if n_slots < 2 * len(ordered):
        raise ScheduleError("superframe too short for beacon and data slots of all leaders")
    slots: List[SlotAssignment] = []
    for leader in ordered:
        slots.append(SlotAssignment(BEACON, leader, len(slots)))
    for _ in range(n_slots - 2 * len(ordered)):
        slots.append(SlotAssignment(RANGING, None, len(slots)))
    for leader in ordered:
        slots.append(SlotAssignment(LEADER_DATA, leader, len(slots)))
    return SuperframeSchedule(slot_length_us, tuple(slots))


def slot_at(schedule: SuperframeSchedule, local_time_ps: float) -> Tuple[SlotAssignment, float]:
    """Map a local time (mod 100 ms) to its containing slot and the offset into it."""
    t = local_time_ps % SUPERFRAME_PS
    index = int(t // schedule.slot_length_ps)
    return schedule.slots[index], t - index * schedule.slot_length_ps


def may_transmit(
    node: int,
    slot: SlotAssignment,
    time_into_slot_ps: float,
    slot_length_ps: SimTime,
    synced: bool,
    granted: bool = False,
    guard_us: float = DEFAULT_GUARD_US,
) -> bool:
    """TDMA admission: the node owns the slot (or holds an open ranging slot
    grant), is clock-synchronized, and sits inside the guard window."""
    if not synced:
        return False
    if slot.owner is not None:
        if slot.owner != node:
            return False
    elif not (slot.kind == RANGING and granted):
        return False
    guard_ps = guard_us * PS_PER_US
    return guard_ps <= time_into_slot_ps <= slot_length_ps - guard_ps


def is_synchronized(last_sync_superframe: Optional[int], current_superframe: int,
                    k: int = SYNC_VALID_SUPERFRAMES) -> bool:
    return last_sync_superframe is not None and current_superframe - last_sync_superframe <= k


@dataclass(frozen=True)
class LocalClock:
    """Affine drifting clock: local(t) = t + offset + drift * (t - last_sync)."""

    offset_ps: float = 0.0
    drift_ppm: float = 0.0
    last_sync_ps: SimTime = 0

    def local_time(self, true_ps: SimTime) -> float:
        return true_ps + self.offset_ps + self.drift_ppm * 1e-6 * (true_ps - self.last_sync_ps)

    def true_for_local(self, local_ps: float) -> SimTime:
        d = self.drift_ppm * 1e-6
        return round((local_ps - self.offset_ps + d * self.last_sync_ps) / (1.0 + d))


@dataclass(frozen=True)
class Beacon:
    """Per-superframe leader broadcast: synchronization reference, leader
    position, zone roster and the leader's versioned neighbor digest."""

    leader: int
    seq: int
    timestamp_ps: int  # leader-local time of the beacon's ranging marker
    position: Tuple[float, float, float]
    roster: Tuple[int, ...] = ()
    neighbors: Tuple[Tuple[int, float], ...] = ()  # (node, link quality)
    digest_version: int = 0

    def to_payload(self) -> bytes:
        """Pack into one frame payload; the neighbor digest is truncated to
        fit, highest-quality links first."""
        head = struct.pack(
            ">HHqH3f", self.leader, self.seq & 0xFFFF, self.timestamp_ps,
            self.digest_version & 0xFFFF, *self.position,
        )
        roster = struct.pack(">B", len(self.roster)) + b"".join(
            struct.pack(">H", m) for m in self.roster
        )
        budget = MAX_PAYLOAD_BYTES - len(head) - len(roster) - 1
        digest = sorted(self.neighbors, key=lambda nq: (-nq[1], nq[0]))[: budget // 3]
        packed = struct.pack(">B", len(digest)) + b"".join(
            struct.pack(">HB", n, min(255, round(q * 255))) for n, q in digest
        )
        payload = head + roster + packed
        assert len(payload) <= MAX_PAYLOAD_BYTES
        return payload

    @classmethod
    def from_payload(cls, data: bytes) -> "Beacon":
        leader, seq, ts, version, x, y, z = struct.unpack_from(">HHqH3f", data, 0)
        off = struct.calcsize(">HHqH3f")
        n_roster = data[off]
        off += 1
        roster = struct.unpack_from(f">{n_roster}H", data, off) if n_roster else ()
        off += 2 * n_roster
        n_digest = data[off]
        off += 1
        neighbors = []
        for _ in range(n_digest):
            node, q = struct.unpack_from(">HB", data, off)
            off += 3
            neighbors.append((node, q / 255.0))
        return cls(leader, seq, ts, (x, y, z), tuple(roster), tuple(neighbors), version)


def sync_from_beacon(
    clock: LocalClock,
    beacon: Beacon,
    arrival_ps: SimTime,
    distance_estimate_m: float,
    last_seen_seq: Optional[int] = None,
) -> Tuple[LocalClock, bool]:
    """Correct the clock so local time reads beacon timestamp plus propagation
    at the arrival instant.  Stale sequence numbers leave the clock unchanged.
    """
    if last_seen_seq is not None and beacon.seq <= last_seen_seq:
        return clock, False
    target_local = beacon.timestamp_ps + propagation_delay_ps(distance_estimate_m)
    return (
        replace(clock, offset_ps=target_local - arrival_ps, last_sync_ps=arrival_ps),
        True,
    )
