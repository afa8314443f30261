import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwbmesh.engine import PS_PER_MS, PS_PER_US
from uwbmesh.mac import (
    BEACON,
    LEADER_DATA,
    RANGING,
    SUPERFRAME_PS,
    Beacon,
    LocalClock,
    ScheduleError,
    build_schedule,
    is_synchronized,
    may_transmit,
    slot_at,
    sync_from_beacon,
)


def test_three_leader_layout():
    schedule = build_schedule([10, 20, 30], 1000)
    kinds = [s.kind for s in schedule.slots]
    assert len(schedule.slots) == 100
    assert kinds[:3] == [BEACON] * 3
    assert kinds[3:97] == [RANGING] * 94
    assert kinds[97:] == [LEADER_DATA] * 3
    owners = [s.owner for s in schedule.slots[97:]]
    assert owners == [10, 20, 30]
    assert len(set(owners)) == 3


def test_one_leader_ten_ms_slots():
    schedule = build_schedule([7], 10_000)
    kinds = [s.kind for s in schedule.slots]
    assert kinds == [BEACON] + [RANGING] * 8 + [LEADER_DATA]


def test_zero_leaders_rejected():
    with pytest.raises(ScheduleError):
        build_schedule([], 1000)


def test_slot_length_must_divide_superframe():
    with pytest.raises(ScheduleError):
        build_schedule([1], 999)


def test_leader_order_is_by_node_id():
    schedule = build_schedule([30, 10, 20], 1000)
    assert [s.owner for s in schedule.slots[:3]] == [10, 20, 30]


def test_slot_at_boundaries_and_modulo():
    schedule = build_schedule([1, 2, 3], 1000)
    slot, into = slot_at(schedule, 0)
    assert slot.index == 0 and slot.kind == BEACON and into == 0
    slot, _ = slot_at(schedule, 99_500 * PS_PER_US)
    assert slot.index == 99 and slot.kind == LEADER_DATA
    a, _ = slot_at(schedule, 150 * PS_PER_MS)
    b, _ = slot_at(schedule, 50 * PS_PER_MS)
    assert a == b


@settings(max_examples=200)
@given(t=st.integers(min_value=0, max_value=SUPERFRAME_PS - 1))
def test_partition_every_instant_in_exactly_one_slot(t):
    schedule = build_schedule([1, 2, 3], 1000)
    slot, into = slot_at(schedule, t)
    assert 0 <= into < schedule.slot_length_ps
    assert slot.index * schedule.slot_length_ps + into == t


def test_may_transmit_owner_mid_slot():
    schedule = build_schedule([1, 2], 1000)
    beacon_slot = schedule.slots[0]
    slot_ps = schedule.slot_length_ps
    assert may_transmit(1, beacon_slot, 500 * PS_PER_US, slot_ps, synced=True)
    assert not may_transmit(2, beacon_slot, 500 * PS_PER_US, slot_ps, synced=True)


def test_may_transmit_guard_window():
    schedule = build_schedule([1], 1000)
    slot = schedule.slots[0]
    slot_ps = schedule.slot_length_ps
    assert not may_transmit(1, slot, 10 * PS_PER_US, slot_ps, synced=True, guard_us=50.0)
    assert may_transmit(1, slot, 50 * PS_PER_US, slot_ps, synced=True, guard_us=50.0)
    assert not may_transmit(1, slot, 960 * PS_PER_US, slot_ps, synced=True, guard_us=50.0)


def test_may_transmit_requires_sync_and_grant():
    schedule = build_schedule([1], 1000)
    ranging_slot = schedule.slots[1]
    data_slot = schedule.slots[-1]
    slot_ps = schedule.slot_length_ps
    t = 500 * PS_PER_US
    assert not may_transmit(5, ranging_slot, t, slot_ps, synced=False, granted=True)
    assert may_transmit(5, ranging_slot, t, slot_ps, synced=True, granted=True)
    assert not may_transmit(5, ranging_slot, t, slot_ps, synced=True, granted=False)
    assert not may_transmit(5, data_slot, t, slot_ps, synced=True, granted=True)


def test_is_synchronized_window():
    assert is_synchronized(10, 15, k=5)
    assert not is_synchronized(10, 16, k=5)
    assert not is_synchronized(None, 3, k=5)


def test_clock_drift_model():
    clock = LocalClock(offset_ps=100.0, drift_ppm=20.0, last_sync_ps=0)
    t = 100 * PS_PER_MS
    assert clock.local_time(t) == pytest.approx(t + 100.0 + 20e-6 * t)
    # inversion
    local = clock.local_time(t)
    assert clock.true_for_local(local) == t


def _beacon(seq=1, ts=0):
    return Beacon(leader=1, seq=seq, timestamp_ps=ts, position=(0.0, 0.0, 1.0))


def test_sync_zero_drift_exact_distance_zero_error():
    from uwbmesh.engine import propagation_delay_ps

    clock = LocalClock(offset_ps=5000.0, drift_ppm=0.0, last_sync_ps=0)
    # beacon sent at leader-local 10^9, arrives prop(3 m) later in true time
    prop = propagation_delay_ps(3.0)
    arrival = 10**9 + prop
    updated, ok = sync_from_beacon(clock, _beacon(ts=10**9), arrival, 3.0)
    assert ok
    # with an exact distance estimate the local clock now reads leader time
    assert updated.local_time(arrival) == pytest.approx(10**9 + prop, abs=1e-9)


def test_sync_inter_beacon_error_bounded_by_drift():
    clock = LocalClock(0.0, 20.0, 0)
    beacon = _beacon(seq=1, ts=0)
    updated, _ = sync_from_beacon(clock, beacon, 0, 0.0)
    # after one 100 ms superframe without resync the error is at most 2 us
    err = updated.local_time(SUPERFRAME_PS) - SUPERFRAME_PS
    assert abs(err) <= 2 * PS_PER_US


def test_sync_stale_sequence_ignored():
    clock = LocalClock(123.0, 0.0, 0)
    updated, ok = sync_from_beacon(clock, _beacon(seq=4), 10**9, 0.0, last_seen_seq=4)
    assert not ok and updated == clock


def test_beacon_payload_round_trip_and_size():
    beacon = Beacon(
        leader=3, seq=77, timestamp_ps=123_456_789, position=(1.5, 2.5, 1.0),
        roster=tuple(range(100, 130)),
        neighbors=tuple((i, 1.0) for i in range(200, 240)),
        digest_version=9,
    )
    payload = beacon.to_payload()
    assert len(payload) <= 116
    back = Beacon.from_payload(payload)
    assert back.leader == 3 and back.seq == 77 and back.digest_version == 9
    assert back.roster == beacon.roster
    # digest truncated to fit but highest-quality first and parseable
    assert len(back.neighbors) <= len(beacon.neighbors)


def test_schedule_dump_table():
    text = build_schedule([1], 10_000).dump()
    lines = text.strip().split("\n")
    assert lines[0] == "index kind owner"
    assert lines[1] == "0 beacon 1"
    assert lines[-1] == "9 leader_data 1"
