import io
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwbmesh.engine import (
    Event,
    RadioMedium,
    SimulationError,
    Simulator,
    airtime_ps,
    propagation_delay_ps,
)


class StubFrame:
    def __init__(self, length=20):
        self.wire_length = length


def test_schedule_at_current_time_fires_first():
    sim = Simulator()
    fired = []
    sim.register(1, lambda s, e: fired.append(e.kind))
    sim.schedule(Event(0, 1, "a"))
    sim.schedule(Event(5, 1, "b"))
    sim.run_until(10)
    assert fired == ["a", "b"]


def test_equal_fire_time_orders_by_target_then_insertion():
    sim = Simulator()
    fired = []
    for target in (5, 2):
        sim.register(target, lambda s, e: fired.append(e.target))
    sim.schedule(Event(100, 5, "x"))
    sim.schedule(Event(100, 2, "x"))
    sim.run_until(100)
    assert fired == [2, 5]

    sim2 = Simulator()
    order = []
    sim2.register(7, lambda s, e: order.append(e.payload))
    sim2.schedule(Event(100, 7, "x", "first"))
    sim2.schedule(Event(100, 7, "x", "second"))
    sim2.run_until(100)
    assert order == ["first", "second"]


def test_event_in_past_rejected():
    sim = Simulator()
    sim.schedule(Event(10, 1, "x"))
    sim.run_until(10)
    with pytest.raises(SimulationError):
        sim.schedule(Event(9, 1, "x"))


def test_cancel_prevents_delivery():
    sim = Simulator()
    fired = []
    sim.register(1, lambda s, e: fired.append(e.kind))
    handle = sim.schedule(Event(5, 1, "x"))
    sim.cancel(handle)
    sim.run_until(10)
    assert fired == []


def test_run_until_empty_queue():
    sim = Simulator()
    stats = sim.run_until(10**12)
    assert stats.events_processed == 0
    assert sim.now == 10**12


def test_propagation_delay_exact_ten_ns():
    # 2.99792458 m at c = 0.299792458 m/ns
    assert propagation_delay_ps(2.99792458) == 10_000


def test_airtime_preamble_plus_bits():
    # 64 us preamble + 127 * 8 bits at 6.8 Mb/s
    expected = 64_000_000 + round(127 * 8 * 1e12 / 6.8e6)
    assert airtime_ps(127) == expected


def test_transmit_requires_position_and_size():
    sim = Simulator()
    medium = RadioMedium(sim)
    with pytest.raises(SimulationError):
        medium.transmit(1, StubFrame())
    medium.set_position(1, (0, 0, 0))
    with pytest.raises(SimulationError):
        medium.transmit(1, StubFrame(length=128))


def _two_node_medium(distance=2.99792458, max_range=math.inf):
    sim = Simulator()
    medium = RadioMedium(sim, max_range_m=max_range)
    medium.set_position(1, (0.0, 0.0, 0.0))
    medium.set_position(2, (distance, 0.0, 0.0))
    return sim, medium


def test_delivery_time_is_start_plus_prop_plus_airtime():
    sim, medium = _two_node_medium()
    got = []

    def handler(s, e):
        rx = medium.resolve(2, e.payload)
        got.append((s.now, rx.corrupted))

    sim.register(2, handler)
    medium.transmit(1, StubFrame(length=20), t_start=0)
    sim.run_until(10**12)
    assert got == [(10_000 + airtime_ps(20), False)]


def test_overlapping_transmissions_corrupt_both():
    sim = Simulator()
    medium = RadioMedium(sim)
    medium.set_position(1, (0.0, 0.0, 0.0))
    medium.set_position(2, (10.0, 0.0, 0.0))
    medium.set_position(3, (0.0, 10.0, 0.0))
    results = []
    sim.register(3, lambda s, e: results.append(medium.resolve(3, e.payload).corrupted))
    medium.transmit(1, StubFrame(length=50), t_start=0)
    medium.transmit(2, StubFrame(length=50), t_start=1000)
    sim.run_until(10**12)
    assert results == [True, True]


def test_out_of_range_receiver_gets_nothing():
    sim, medium = _two_node_medium(distance=100.0, max_range=30.0)
    sim.register(2, lambda s, e: pytest.fail("should not be delivered"))
    medium.transmit(1, StubFrame(), t_start=0)
    sim.run_until(10**12)


def test_channel_mismatch_resolves_to_none():
    sim, medium = _two_node_medium()
    got = []
    sim.register(2, lambda s, e: got.append(medium.resolve(2, e.payload)))
    medium.set_channel(1, 0)
    medium.set_channel(2, 1)
    medium.transmit(1, StubFrame(), t_start=0)
    sim.run_until(10**12)
    assert got == [None]


def test_no_phantom_deliveries():
    sim = Simulator()
    medium = RadioMedium(sim, max_range_m=50.0)
    n = 6
    for i in range(n):
        medium.set_position(i, (float(i), 0.0, 0.0))
        sim.register(i, lambda s, e: None)
    handles = []
    for i in range(n):
        handles += medium.transmit(i, StubFrame(), t_start=i * 10**6)
    stats = sim.run_until(10**12)
    assert len(handles) <= n * (n - 1)
    assert stats.events_processed == len(handles)


@settings(max_examples=50)
@given(
    ax=st.floats(-100, 100), ay=st.floats(-100, 100), az=st.floats(0, 10),
    bx=st.floats(-100, 100), by=st.floats(-100, 100), bz=st.floats(0, 10),
)
def test_delay_symmetry(ax, ay, az, bx, by, bz):
    sim = Simulator()
    medium = RadioMedium(sim)
    medium.set_position(1, (ax, ay, az))
    medium.set_position(2, (bx, by, bz))
    assert medium.delay_ps(1, 2) == medium.delay_ps(2, 1)


def test_trace_lines_are_stable():
    buf = io.StringIO()
    sim = Simulator(trace=buf)
    sim.register(4, lambda s, e: s.trace(4, "tick", "n=1"))
    sim.schedule(Event(1234, 4, "x"))
    sim.run_until(10**6)
    assert buf.getvalue() == "1234 4 tick n=1\n"


def test_identical_runs_produce_identical_traces():
    def run():
        buf = io.StringIO()
        sim = Simulator(trace=buf)
        medium = RadioMedium(sim)
        for i in range(4):
            medium.set_position(i, (float(i) * 3.0, 0.0, 0.0))

            def handler(s, e, i=i):
                rx = medium.resolve(i, e.payload)
                if rx is not None:
                    s.trace(i, "rx", f"from={rx.sender} bad={int(rx.corrupted)}")

            sim.register(i, handler)
        for i in range(4):
            medium.transmit(i, StubFrame(), t_start=i * 300_000_000)
        sim.run_until(10**12)
        return buf.getvalue()

    first, second = run(), run()
    assert first == second and first.count("\n") > 0
