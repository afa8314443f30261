import numpy as np
import pytest

from uwbmesh.engine import C_M_PER_NS, PS_PER_NS
from uwbmesh.mac import LocalClock
from uwbmesh.phy import AttackRegistry, ToaPair
from uwbmesh.ranging import (
    COMPLETE,
    INVALIDATED,
    RangingProtocolError,
    check_toa_consistency,
    run_session,
    sstwr_tof_ns,
    tof_to_distance_m,
)


def test_sstwr_ten_meter_identity():
    tof = sstwr_tof_ns(0.0, 33.356, 1033.356, 1066.712)
    assert tof == pytest.approx(33.356)
    assert tof_to_distance_m(tof) == pytest.approx(10.0002, abs=1e-3)


def test_sstwr_zero_distance():
    assert sstwr_tof_ns(0.0, 0.0, 1000.0, 1000.0) == 0.0


def test_sstwr_non_causal_rejected():
    with pytest.raises(RangingProtocolError):
        sstwr_tof_ns(0.0, 10.0, 5.0, 100.0)  # t3 < t2
    with pytest.raises(RangingProtocolError):
        sstwr_tof_ns(100.0, 10.0, 20.0, 100.0)  # t4 <= t1


def test_consistency_examples():
    assert check_toa_consistency(ToaPair(1000.0 * PS_PER_NS, 1000.3 * PS_PER_NS), 1.0)
    assert not check_toa_consistency(ToaPair(990.0 * PS_PER_NS, 1000.0 * PS_PER_NS), 1.0)
    # boundary |delta| == tau is ok
    assert check_toa_consistency(ToaPair(0.0, 1.0 * PS_PER_NS), 1.0)


def test_consistency_requires_positive_tau():
    with pytest.raises(ValueError):
        check_toa_consistency(ToaPair(0.0, 0.0), 0.0)


def test_session_clean_ten_meters_within_one_mm():
    session = run_session(10.0, LocalClock(), LocalClock())
    assert session.state == COMPLETE
    assert abs(session.result.distance_m - 10.0) <= 0.001


def test_session_drift_bound_example():
    # 20 ppm one-sided drift, 1000 ns reply: |error| <= drift * reply / 2
    session = run_session(
        10.0, LocalClock(0.0, 0.0, 0), LocalClock(0.0, 20.0, 0),
        reply_delay_us=1.0,
    )
    assert session.state == COMPLETE
    err_ns = abs(session.result.tof_ns - 10.0 / C_M_PER_NS)
    assert err_ns <= 0.01


def test_session_drift_with_fixed_reply_delay_within_one_cm():
    rng = np.random.default_rng(42)
    worst = 0.0
    for i in range(1000):
        di = rng.uniform(-20.0, 20.0)
        dr = rng.uniform(-20.0, 20.0)
        session = run_session(
            10.0, LocalClock(0.0, di, 0), LocalClock(0.0, dr, 0),
            reply_delay_us=200.0, rng=np.random.default_rng(i),
        )
        assert session.state == COMPLETE
        worst = max(worst, abs(session.result.distance_m - 10.0))
    assert worst <= 0.01


def test_session_symmetry():
    a, b = LocalClock(0.0, 7.0, 0), LocalClock(0.0, -4.0, 0)
    forward = run_session(10.0, a, b).result.distance_m
    backward = run_session(10.0, b, a).result.distance_m
    assert abs(forward - backward) <= 0.001


def test_sts_advance_attack_always_invalidated():
    attacks = AttackRegistry(known_nodes=[0, 1])
    attacks.inject("sts_advance", 10.0, (0, 1))
    detected = 0
    for i in range(1000):
        session = run_session(
            10.0, LocalClock(), LocalClock(), attacks=attacks,
            toa_sigma_ns=0.2, rng=np.random.default_rng(i),
        )
        if session.state == INVALIDATED:
            assert session.result is not None and not session.result.valid
            assert session.result.invalidation_reason is not None
            detected += 1
    assert detected == 1000


def test_phy_delay_attack_detected():
    attacks = AttackRegistry(known_nodes=[0, 1])
    attacks.inject("phy_delay", 5.0, (0, 1))
    session = run_session(10.0, LocalClock(), LocalClock(), attacks=attacks)
    assert session.state == INVALIDATED
    assert session.result.invalidation_reason == "toa_mismatch_init"


def test_noise_only_false_positive_rate_below_one_in_thousand():
    # sigma = tau / 5
    rng = np.random.default_rng(7)
    invalid = 0
    trials = 10_000
    for _ in range(trials):
        session = run_session(
            10.0, LocalClock(), LocalClock(), toa_sigma_ns=0.2, tau_ns=1.0, rng=rng,
        )
        if session.state == INVALIDATED:
            invalid += 1
    assert invalid / trials < 0.001


def test_attack_above_tau_plus_six_sigma_always_detected():
    # single-timeline displacement just above tau + 6 sigma
    sigma = 0.2
    magnitude = 1.0 + 6 * sigma + 0.05
    attacks = AttackRegistry(known_nodes=[0, 1])
    attacks.inject("sts_advance", magnitude, (0, 1))
    rng = np.random.default_rng(11)
    for _ in range(2000):
        session = run_session(
            10.0, LocalClock(), LocalClock(), attacks=attacks,
            toa_sigma_ns=sigma, rng=rng,
        )
        assert session.state == INVALIDATED


def test_invalidated_session_emits_no_usable_result():
    attacks = AttackRegistry(known_nodes=[0, 1])
    attacks.inject("sts_advance", 50.0, (0, 1))
    session = run_session(10.0, LocalClock(), LocalClock(), attacks=attacks)
    assert session.state == INVALIDATED
    assert not session.result.valid
    assert session.result.invalidation_reason.startswith("toa_mismatch")
