"""Frame representation, synthetic channel impulse responses and ToA measurement.

The scrambled-timestamp sequence (STS) is modeled abstractly: a received frame
yields two separately measurable arrival timelines (STS and PHY header), and
attack hooks displace them independently.  Hardware impairments are a
deterministic per-device perturbation of the pulse shape around the first path;
they carry the fingerprint used by the security module.
"""

from __future__ import annotations

import binascii
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .engine import MAX_FRAME_BYTES, PS_PER_NS, SimTime, propagation_delay_ps

MAC_HEADER_BYTES = 11  # frame control 2, sequence 1, pan id 2, dst 2, src 2, checksum 2
MAX_PAYLOAD_BYTES = MAX_FRAME_BYTES - MAC_HEADER_BYTES  # 116

CIR_TAPS = 128
CIR_TAP_SPACING_PS = 25
LEADING_EDGE_THRESHOLD = 0.4

BROADCAST_ADDR = 0xFFFF


class FrameError(Exception):
    pass


class UndetectableError(Exception):
    """No tap of the CIR exceeds the leading-edge threshold."""


class AttackError(Exception):
    pass


def crc16(data: bytes) -> int:
    return binascii.crc_hqx(data, 0)


@dataclass
class Frame:
    """The on-air unit: 11-byte MAC header plus at most 116 payload bytes.

    Header field use in this network: `dst`/`src` carry the mesh endpoints
    (final destination / origin) as 16-bit short addresses, `frame_type` is
    the first frame-control byte and `ttl` rides in the second.
    """

    frame_type: int
    seq: int
    pan_id: int
    dst: int
    src: int
    payload: bytes = b""
    ttl: int = 0
    has_sts: bool = True

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD_BYTES:
            raise FrameError(
                f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD_BYTES}-byte limit"
            )

    @property
    def wire_length(self) -> int:
        return MAC_HEADER_BYTES + len(self.payload)

    def header_bytes(self) -> bytes:
        return bytes(
            [
                self.frame_type & 0xFF,
                self.ttl & 0xFF,
                self.seq & 0xFF,
                (self.pan_id >> 8) & 0xFF,
                self.pan_id & 0xFF,
                (self.dst >> 8) & 0xFF,
                self.dst & 0xFF,
                (self.src >> 8) & 0xFF,
                self.src & 0xFF,
            ]
        )

    def to_bytes(self) -> bytes:
        body = self.header_bytes() + self.payload
        return body + crc16(body).to_bytes(2, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "Frame":
        if len(data) < MAC_HEADER_BYTES:
            raise FrameError("truncated frame")
        if len(data) > MAX_FRAME_BYTES:
            raise FrameError("oversized frame")
        body, checksum = data[:-2], int.from_bytes(data[-2:], "big")
        if crc16(body) != checksum:
            raise FrameError("checksum mismatch")
        return cls(
            frame_type=body[0],
            ttl=body[1],
            seq=body[2],
            pan_id=(body[3] << 8) | body[4],
            dst=(body[5] << 8) | body[6],
            src=(body[7] << 8) | body[8],
            payload=bytes(body[9:]),
        )


@dataclass(frozen=True)
class ImpairmentSignature:
    """Per-device perturbation of the pulse shape, fixed for the device's life.

    Drawn once from a seeded generator; the all-zero signature is the ideal
    impairment-free device used as the fingerprint template.
    """

    pulse_asymmetry: float
    ringing_amplitude: float
    ringing_decay: float
    phase_slope: float

    @classmethod
    def from_seed(cls, seed: int, device_id: int) -> "ImpairmentSignature":
        # ranges keep every perturbed tap below the 0.4 leading-edge threshold
        rng = np.random.default_rng((seed, device_id, 0x5167))
        return cls(
            pulse_asymmetry=float(rng.uniform(0.05, 0.35)),
            ringing_amplitude=float(rng.uniform(0.08, 0.32)),
            ringing_decay=float(rng.uniform(0.30, 0.80)),
            phase_slope=float(rng.uniform(-0.60, 0.60)),
        )

    @classmethod
    def ideal(cls) -> "ImpairmentSignature":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class Cir:
    """Channel impulse response: complex taps on a fixed picosecond grid.

    `window_start_ps` anchors tap 0 on the absolute timeline so a first-path
    estimate can be reported as an absolute arrival time.  `sts_offset_ps` and
    `phy_offset_ps` displace the two measurable timelines (attack hooks).
    """

    taps: np.ndarray
    tap_spacing_ps: int
    true_toa_ps: SimTime
    window_start_ps: SimTime
    sts_offset_ps: int = 0
    phy_offset_ps: int = 0

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.complex128)
        if not np.all(np.isfinite(self.taps.view(np.float64))):
            raise ValueError("CIR taps must be finite")


# relative pulse magnitudes around the first path; the rise tap at -1 stays
# below the 0.4 leading-edge threshold even at maximum pulse asymmetry
_PULSE_CORE: Tuple[Tuple[int, float], ...] = (
    (-2, 0.10),
    (-1, 0.28),
    (0, 1.0),
    (1, 0.52),
    (2, 0.22),
)
_RING_SPAN = range(3, 9)  # device ringing tail; keeps device differences within +-8 taps


def synthesize_cir(
    distance_m: float,
    signature: ImpairmentSignature,
    noise_snr_db: Optional[float] = None,
    seed: int = 0,
    n_taps: int = CIR_TAPS,
    tap_spacing_ps: int = CIR_TAP_SPACING_PS,
    tx_time_ps: SimTime = 0,
) -> Cir:
    """Synthesize a CIR for a link of the given length and device signature.

    Main peak lands at the tap nearest distance/c (modulo the window), peak
    amplitude scales as 1/distance, and complex white noise is added at the
    requested SNR relative to the peak.
    """
    if distance_m <= 0:
        raise ValueError("distance must be positive")
    prop_ps = propagation_delay_ps(distance_m)
    true_toa = tx_time_ps + prop_ps
    peak_index = round(prop_ps / tap_spacing_ps) % n_taps
    amp = 1.0 / distance_m

    taps = np.zeros(n_taps, dtype=np.complex128)
    a = signature.pulse_asymmetry
    for offset, mag in _PULSE_CORE:
        m = mag * (1.0 + a) if offset < 0 else mag * (1.0 - a) if offset > 0 else mag
        phase = signature.phase_slope * offset
        taps[(peak_index + offset) % n_taps] = amp * m * np.exp(1j * phase)
    for offset in _RING_SPAN:
        m = signature.ringing_amplitude * signature.ringing_decay ** (offset - _RING_SPAN.start)
        phase = signature.phase_slope * offset
        taps[(peak_index + offset) % n_taps] = amp * m * np.exp(1j * phase)

    if noise_snr_db is not None:
        rng = np.random.default_rng((seed, 0xC18))
        sigma = amp * 10.0 ** (-noise_snr_db / 20.0) / math.sqrt(2.0)
        taps = taps + rng.normal(0.0, sigma, n_taps) + 1j * rng.normal(0.0, sigma, n_taps)

    window_start = true_toa - peak_index * tap_spacing_ps
    return Cir(taps, tap_spacing_ps, true_toa, window_start)


def measure_toa(
    cir: Cir,
    method: str = "sts",
    threshold: float = LEADING_EDGE_THRESHOLD,
) -> SimTime:
    """First-path arrival estimate: earliest tap at or above threshold x peak.

    The `sts` method reads the attacker-controllable STS timeline, `phy_header`
    the independent header timeline.
    """
    mags = np.abs(cir.taps)
    peak = float(mags.max())
    if peak <= 0.0:
        raise UndetectableError("no tap exceeds the leading-edge threshold")
    idx = int(np.argmax(mags >= threshold * peak))
    toa = cir.window_start_ps + idx * cir.tap_spacing_ps
    if method == "sts":
        return toa + cir.sts_offset_ps
    if method == "phy_header":
        return toa + cir.phy_offset_ps
    raise ValueError(f"unknown ToA method {method!r}")


@dataclass
class ToaPair:
    """Arrival timestamps of one received message on both timelines (ps)."""

    toa_sts: float
    toa_phy: float

    @property
    def discrepancy_ps(self) -> float:
        return abs(self.toa_sts - self.toa_phy)


@dataclass
class _LinkAttack:
    sts_shift_ps: int = 0
    phy_shift_ps: int = 0
    start_ps: SimTime = 0


class AttackRegistry:
    """Per-link ToA manipulation state.

    An entry displaces every subsequent ToA measurement on the link: an
    `sts_advance` shifts the STS timeline earlier, a `phy_delay` shifts the
    PHY-header timeline later.  Links are unordered node pairs.
    """

    def __init__(self, known_nodes: Optional[Iterable[int]] = None):
        self._known = set(known_nodes) if known_nodes is not None else None
        self._attacks: Dict[frozenset, List[_LinkAttack]] = {}

    def _key(self, link: Tuple[int, int]) -> frozenset:
        a, b = link
        if self._known is not None and (a not in self._known or b not in self._known):
            raise AttackError(f"unknown link {link}")
        return frozenset((a, b))

    def inject(
        self,
        kind: str,
        magnitude_ns: float,
        link: Tuple[int, int],
        start_ps: SimTime = 0,
    ) -> None:
        if magnitude_ns <= 0:
            raise AttackError("attack magnitude must be positive")
        shift = round(magnitude_ns * PS_PER_NS)
        if kind == "sts_advance":
            entry = _LinkAttack(sts_shift_ps=-shift, start_ps=start_ps)
        elif kind == "phy_delay":
            entry = _LinkAttack(phy_shift_ps=shift, start_ps=start_ps)
        else:
            raise AttackError(f"unknown attack kind {kind!r}")
        self._attacks.setdefault(self._key(link), []).append(entry)

    def clear(self, link: Tuple[int, int]) -> None:
        self._attacks.pop(self._key(link), None)

    def displacement_ps(self, link: Tuple[int, int], now_ps: SimTime = 0) -> Tuple[int, int]:
        """(sts shift, phy shift) active on the link at `now_ps`."""
        sts = phy = 0
        for entry in self._attacks.get(self._key(link), ()):
            if entry.start_ps <= now_ps:
                sts += entry.sts_shift_ps
                phy += entry.phy_shift_ps
        return sts, phy

    def apply_to_cir(self, cir: Cir, link: Tuple[int, int], now_ps: SimTime = 0) -> Cir:
        sts, phy = self.displacement_ps(link, now_ps)
        cir.sts_offset_ps += sts
        cir.phy_offset_ps += phy
        return cir


def export_cir_csv(cir: Cir, path: str) -> None:
    """Dump taps as CSV (tap index, real, imag) for offline analysis."""
    lines = ["tap,real,imag"]
    for i, tap in enumerate(cir.taps):
        lines.append(f"{i},{tap.real!r},{tap.imag!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
