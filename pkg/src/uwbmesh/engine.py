"""Deterministic discrete-event kernel and virtual radio medium.

All timestamps are integer picoseconds.  Determinism contract: events with
equal fire time are processed in (target id, insertion sequence) order, so
re-running a scenario with the same seed produces a byte-identical trace.

Trace format (stable, one record per line, space separated):

    <time_ps> <node> <kind> <details...>

where <details> is a fixed per-kind sequence of key=value tokens.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, IO, List, Optional, Tuple

SimTime = int

PS_PER_NS = 1_000
PS_PER_US = 1_000_000
PS_PER_MS = 1_000_000_000
PS_PER_S = 1_000_000_000_000

# speed of light, meters per nanosecond
C_M_PER_NS = 0.299792458

MAX_FRAME_BYTES = 127

DEFAULT_DATARATE_BPS = 6.8e6
DEFAULT_PREAMBLE_US = 64.0


class SimulationError(Exception):
    """A protocol logic bug surfaced by the kernel (e.g. scheduling in the past)."""


def propagation_delay_ps(distance_m: float) -> SimTime:
    """Line-of-sight propagation delay rounded to the picosecond grid."""
    return round(distance_m / C_M_PER_NS * PS_PER_NS)


def airtime_ps(
    length_bytes: int,
    datarate_bps: float = DEFAULT_DATARATE_BPS,
    preamble_us: float = DEFAULT_PREAMBLE_US,
) -> SimTime:
    """On-air duration of a frame: preamble plus payload bits at the PHY rate."""
    return round(preamble_us * PS_PER_US) + round(length_bytes * 8 * PS_PER_S / datarate_bps)


@dataclass
class Event:
    fire_time: SimTime
    target: int
    kind: str
    payload: Any = None


@dataclass
class RunStats:
    """Counters returned by :meth:`Simulator.run_until`."""

    events_processed: int = 0
    frames_transmitted: int = 0
    frames_delivered: Dict[int, int] = field(default_factory=dict)
    frames_corrupted: int = 0

    def count_delivery(self, node: int) -> None:
        self.frames_delivered[node] = self.frames_delivered.get(node, 0) + 1


Handler = Callable[["Simulator", Event], None]


class Simulator:
    """Single-threaded event loop.  Handlers are invoked sequentially and must
    not assume any parallelism."""

    def __init__(self, trace: Optional[IO[str]] = None):
        self.now: SimTime = 0
        self.stats = RunStats()
        self._heap: List[Tuple[SimTime, int, int, Event]] = []
        self._seq = 0
        self._cancelled: set[int] = set()
        self._handlers: Dict[int, Handler] = {}
        self._trace = trace

    def register(self, node_id: int, handler: Handler) -> None:
        self._handlers[node_id] = handler

    def schedule(self, event: Event) -> int:
        """Enqueue an event; returns a handle usable with :meth:`cancel`.

        Rejects events in the past: that is always a protocol logic bug.
        """
        if event.fire_time < self.now:
            raise SimulationError(
                f"event {event.kind!r} scheduled at {event.fire_time} but now={self.now}"
            )
        self._seq += 1
        heapq.heappush(self._heap, (event.fire_time, event.target, self._seq, event))
        return self._seq

    def schedule_at(self, fire_time: SimTime, target: int, kind: str, payload: Any = None) -> int:
        return self.schedule(Event(fire_time, target, kind, payload))

    def cancel(self, handle: int) -> None:
        self._cancelled.add(handle)

    def trace(self, node: int, kind: str, details: str = "") -> None:
        if self._trace is not None:
            if details:
                self._trace.write(f"{self.now} {node} {kind} {details}\n")
            else:
                self._trace.write(f"{self.now} {node} {kind}\n")

    def run_until(self, t_end: SimTime) -> RunStats:
        """Process every event with fire_time <= t_end in deterministic order."""
        heap = self._heap
        while heap and heap[0][0] <= t_end:
            fire_time, target, seq, event = heapq.heappop(heap)
            if seq in self._cancelled:
                self._cancelled.discard(seq)
                continue
            self.now = fire_time
            self.stats.events_processed += 1
            handler = self._handlers.get(target)
            if handler is not None:
                handler(self, event)
        if t_end > self.now:
            self.now = t_end
        return self.stats


@dataclass
class Transmission:
    sender: int
    channel: int
    t_start: SimTime
    t_end: SimTime  # end of last bit at the transmitter
    frame: Any


@dataclass
class Reception:
    """Payload of a delivery event scheduled by the medium."""

    transmission: Transmission
    t_air_start: SimTime  # first bit at the receiver
    t_air_end: SimTime    # last bit at the receiver


@dataclass
class ReceivedFrame:
    frame: Any
    sender: int
    t_rx: SimTime
    corrupted: bool


class RadioMedium:
    """Positions, per-node channel tuning and in-flight transmissions.

    A receiver sees a collision iff two transmissions on its tuned channel
    overlap in time at its position; overlapping receptions mark all involved
    frames corrupted (binary collision model, no capture effect).
    """

    RX_KIND = "rx"

    def __init__(
        self,
        sim: Simulator,
        max_range_m: float = math.inf,
        datarate_bps: float = DEFAULT_DATARATE_BPS,
        preamble_us: float = DEFAULT_PREAMBLE_US,
    ):
        self.sim = sim
        self.max_range_m = max_range_m
        self.datarate_bps = datarate_bps
        self.preamble_us = preamble_us
        self.positions: Dict[int, Tuple[float, float, float]] = {}
        self.channels: Dict[int, int] = {}
        self._active: List[Transmission] = []

    def set_position(self, node: int, position: Tuple[float, float, float]) -> None:
        self.positions[node] = tuple(float(c) for c in position)

    def set_channel(self, node: int, channel: int) -> None:
        self.channels[node] = channel

    def distance_m(self, a: int, b: int) -> float:
        pa, pb = self.positions[a], self.positions[b]
        return math.dist(pa, pb)

    def delay_ps(self, a: int, b: int) -> SimTime:
        return propagation_delay_ps(self.distance_m(a, b))

    def airtime_ps(self, length_bytes: int) -> SimTime:
        return airtime_ps(length_bytes, self.datarate_bps, self.preamble_us)

    def transmit(
        self,
        sender: int,
        frame: Any,
        t_start: Optional[SimTime] = None,
        channel: Optional[int] = None,
    ) -> List[int]:
        """Put a frame on the air; schedules one delivery event per in-range node.

        The frame object must expose an integer ``wire_length``; frames above
        127 bytes are rejected.
        """
        if sender not in self.positions:
            raise SimulationError(f"sender {sender} has no position")
        length = frame.wire_length
        if length > MAX_FRAME_BYTES:
            raise SimulationError(f"frame of {length} bytes exceeds {MAX_FRAME_BYTES}-byte limit")
        if t_start is None:
            t_start = self.sim.now
        if channel is None:
            channel = self.channels.get(sender, 0)
        air = self.airtime_ps(length)
        tx = Transmission(sender, channel, t_start, t_start + air, frame)
        self._prune(t_start)
        self._active.append(tx)
        self.sim.stats.frames_transmitted += 1
        handles = []
        sender_pos = self.positions[sender]
        for node in sorted(self.positions):
            if node == sender:
                continue
            d = math.dist(sender_pos, self.positions[node])
            if d > self.max_range_m:
                continue
            prop = propagation_delay_ps(d)
            rx = Reception(tx, t_start + prop, t_start + prop + air)
            handles.append(
                self.sim.schedule(Event(rx.t_air_end, node, self.RX_KIND, rx))
            )
        return handles

    def resolve(self, node: int, reception: Reception) -> Optional[ReceivedFrame]:
        """Turn a delivery event into a received frame at `node`.

        Returns None when the receiver is tuned to a different channel.  The
        corrupted flag is set when any other same-channel transmission overlaps
        the reception window at this receiver.
        """
        tx = reception.transmission
        if self.channels.get(node, 0) != tx.channel:
            return None
        corrupted = False
        node_pos = self.positions[node]
        for other in self._active:
            if other is tx or other.channel != tx.channel:
                continue
            prop = propagation_delay_ps(math.dist(self.positions[other.sender], node_pos))
            if other.t_start + prop < reception.t_air_end and other.t_end + prop > reception.t_air_start:
                corrupted = True
                break
        if corrupted:
            self.sim.stats.frames_corrupted += 1
        else:
            self.sim.stats.count_delivery(node)
        return ReceivedFrame(tx.frame, tx.sender, reception.t_air_end, corrupted)

    def _prune(self, now: SimTime) -> None:
        # keep anything that could still overlap a reception in flight
        horizon = now - 10 * PS_PER_US
        if len(self._active) > 32:
            self._active = [t for t in self._active if t.t_end >= horizon]
