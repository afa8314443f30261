"""Single-sided two-way ranging with the dual-ToA consistency countermeasure.

Every received ranging message is timestamped on two timelines (STS and PHY
header).  A discrepancy above tau invalidates the session and no range result
is emitted.  The two timelines share most of their first-path measurement
jitter (same received waveform); only a fraction of the noise variance is
timeline-specific, which keeps the consistency check's false-positive rate
far below the detection requirement while leaving per-timestamp accuracy
unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .engine import C_M_PER_NS, PS_PER_NS, PS_PER_US, SimTime, propagation_delay_ps
from .mac import LocalClock
from .phy import AttackRegistry, ToaPair

DEFAULT_TAU_NS = 1.0
DEFAULT_REPLY_DELAY_US = 200.0

# fraction of ToA noise variance common to both timelines
TOA_NOISE_SHARED_FRACTION = 0.5

INIT = "init"
RESPONDED = "responded"
FINAL = "final"
COMPLETE = "complete"
INVALIDATED = "invalidated"


class RangingProtocolError(Exception):
    pass


def sstwr_tof_ns(t1: float, t2: float, t3: float, t4: float) -> float:
    """SS-TWR time of flight from one round trip minus the responder reply.

    t1/t4 are initiator timestamps, t2/t3 responder timestamps (ns).
    """
    if t4 <= t1:
        raise RangingProtocolError(f"non-causal round trip: t4={t4} <= t1={t1}")
    if t3 <= t2:
        raise RangingProtocolError(f"non-causal reply: t3={t3} <= t2={t2}")
    return ((t4 - t1) - (t3 - t2)) / 2.0


def tof_to_distance_m(tof_ns: float) -> float:
    return tof_ns * C_M_PER_NS


def check_toa_consistency(pair: ToaPair, tau_ns: float = DEFAULT_TAU_NS) -> bool:
    """True (ok) iff the STS and PHY-header arrival estimates agree within tau."""
    if tau_ns <= 0:
        raise ValueError("tau must be positive")
    return pair.discrepancy_ps <= tau_ns * PS_PER_NS


@dataclass
class RangeResult:
    distance_m: float
    tof_ns: float
    valid: bool
    invalidation_reason: Optional[str] = None


@dataclass
class RangingSession:
    initiator: int
    responder: int
    state: str = INIT
    t1_ns: Optional[float] = None
    t2_ns: Optional[float] = None
    t3_ns: Optional[float] = None
    t4_ns: Optional[float] = None
    toa_pairs: List[ToaPair] = field(default_factory=list)
    result: Optional[RangeResult] = None

    def invalidate(self, reason: str) -> None:
        self.state = INVALIDATED
        self.result = RangeResult(0.0, 0.0, False, reason)


def measure_arrival(
    clock: LocalClock,
    true_arrival_ps: SimTime,
    displacement: Tuple[int, int] = (0, 0),
    toa_sigma_ns: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> ToaPair:
    """Model the receive-side dual timestamping of one ranging message.

    Returns local-clock arrival times on both timelines, displaced by any
    active attack and jittered by first-path measurement noise (a shared
    component plus a smaller per-timeline component).
    """
    base = clock.local_time(true_arrival_ps)
    sigma_ps = toa_sigma_ns * PS_PER_NS
    if sigma_ps > 0.0 and rng is not None:
        shared = rng.normal(0.0, sigma_ps * math.sqrt(TOA_NOISE_SHARED_FRACTION))
        own = sigma_ps * math.sqrt(1.0 - TOA_NOISE_SHARED_FRACTION)
        n_sts = shared + rng.normal(0.0, own)
        n_phy = shared + rng.normal(0.0, own)
    else:
        n_sts = n_phy = 0.0
    return ToaPair(base + displacement[0] + n_sts, base + displacement[1] + n_phy)


def run_session(
    distance_m: float,
    clock_initiator: LocalClock,
    clock_responder: LocalClock,
    *,
    initiator: int = 0,
    responder: int = 1,
    start_ps: SimTime = 0,
    reply_delay_us: float = DEFAULT_REPLY_DELAY_US,
    tau_ns: float = DEFAULT_TAU_NS,
    toa_sigma_ns: float = 0.0,
    cfo_sigma_ppm: float = 0.0,
    attacks: Optional[AttackRegistry] = None,
    rng: Optional[np.random.Generator] = None,
) -> RangingSession:
    """Execute one init/response/final exchange and return the session.

    The responder interval (t3 - t2) is rescaled by the carrier-derived clock
    ratio before the SS-TWR combination, so the result stays within the error
    budget at the fixed in-slot reply delay even under worst-case crystal
    drift.  Any failed consistency check terminates the session: the state
    becomes invalidated and no usable RangeResult is emitted.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    session = RangingSession(initiator, responder)
    link = (initiator, responder)
    disp = attacks.displacement_ps(link, start_ps) if attacks is not None else (0, 0)
    prop_ps = propagation_delay_ps(distance_m)
    reply_ps = reply_delay_us * PS_PER_US

    # initiation message
    t1_local = clock_initiator.local_time(start_ps)
    arrival_r = start_ps + prop_ps
    pair_init = measure_arrival(clock_responder, arrival_r, disp, toa_sigma_ns, rng)
    session.toa_pairs.append(pair_init)
    if not check_toa_consistency(pair_init, tau_ns):
        session.invalidate("toa_mismatch_init")
        return session
    session.t1_ns = t1_local / PS_PER_NS
    session.t2_ns = pair_init.toa_sts / PS_PER_NS

    # response message, sent a fixed reply delay after reception
    t3_local = pair_init.toa_sts + reply_ps
    t3_true = clock_responder.true_for_local(t3_local)
    session.state = RESPONDED
    arrival_i = t3_true + prop_ps
    pair_resp = measure_arrival(clock_initiator, arrival_i, disp, toa_sigma_ns, rng)
    session.toa_pairs.append(pair_resp)
    if not check_toa_consistency(pair_resp, tau_ns):
        session.invalidate("toa_mismatch_response")
        return session
    session.t3_ns = t3_local / PS_PER_NS
    session.t4_ns = pair_resp.toa_sts / PS_PER_NS

    # final message reports the result to the responder
    t_final_true = clock_initiator.true_for_local(pair_resp.toa_sts + reply_ps)
    session.state = FINAL
    arrival_f = t_final_true + prop_ps
    pair_final = measure_arrival(clock_responder, arrival_f, disp, toa_sigma_ns, rng)
    session.toa_pairs.append(pair_final)
    if not check_toa_consistency(pair_final, tau_ns):
        session.invalidate("toa_mismatch_final")
        return session

    ratio = measured_clock_ratio(clock_initiator, clock_responder, cfo_sigma_ppm, rng)
    reply_initiator_units = (session.t3_ns - session.t2_ns) * ratio
    tof_ns = ((session.t4_ns - session.t1_ns) - reply_initiator_units) / 2.0
    session.state = COMPLETE
    session.result = RangeResult(tof_to_distance_m(tof_ns), tof_ns, True)
    return session


def measured_clock_ratio(
    clock_initiator: LocalClock,
    clock_responder: LocalClock,
    cfo_sigma_ppm: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Initiator's estimate of (own rate / responder rate) from the carrier
    frequency offset of the received response."""
    ratio = (1.0 + clock_initiator.drift_ppm * 1e-6) / (1.0 + clock_responder.drift_ppm * 1e-6)
    if cfo_sigma_ppm > 0.0 and rng is not None:
        ratio += rng.normal(0.0, cfo_sigma_ppm * 1e-6)
    return ratio
