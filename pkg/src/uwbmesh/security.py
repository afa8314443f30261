"""Key-policy enforcement, CIR preprocessing and fingerprint re-identification.

The fingerprint pipeline is a deterministic stand-in for a learned extractor:
preprocessing removes signal-strength and timing bias (peak-normalize, center
the peak), the embedding measures magnitude/phase deviations from the ideal
pulse template in a window around the first path, and re-identification
compares query embeddings against an enrolled anchor by cosine similarity.
The interface (embedding, anchor, threshold) is what a trained model would
plug into.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .engine import SimTime
from .phy import Cir, ImpairmentSignature, synthesize_cir

PEAK_INDEX = 32
EMBEDDING_DIM = 64
EMBEDDING_WINDOW = 16  # taps each side of the centered peak
MIN_ENROLL_SAMPLES = 10
DEFAULT_RFF_THRESHOLD = 0.9


class SecurityError(Exception):
    pass


@dataclass(frozen=True)
class KeyPolicy:
    """Per-link policy set by the facility administrator at bootstrap."""

    max_distance_m: float = 10.0
    max_frames_per_superframe: int = 100
    rff_required: bool = False
    rff_threshold: float = DEFAULT_RFF_THRESHOLD

    def __post_init__(self):
        if self.max_distance_m <= 0:
            raise SecurityError("max_distance must be positive")
        if self.max_frames_per_superframe < 1:
            raise SecurityError("frame budget must be at least 1")


@dataclass
class ProcessedCir:
    """Peak at a fixed index with magnitude exactly 1."""

    taps: np.ndarray
    peak_index: int = PEAK_INDEX


def preprocess_cir(raw: Cir, peak_index: int = PEAK_INDEX) -> ProcessedCir:
    """Normalize out signal strength and center the peak timing.

    Magnitudes are divided by the peak magnitude and taps circularly shifted
    so the peak lands at `peak_index`; identical captures at any scale or
    window alignment produce the same output.
    """
    taps = np.asarray(raw.taps, dtype=np.complex128)
    mags = np.abs(taps)
    peak = float(mags.max())
    if peak <= 0.0:
        raise SecurityError("all-zero CIR cannot be preprocessed")
    argmax = int(np.argmax(mags))
    shifted = np.roll(taps / peak, peak_index - argmax)
    return ProcessedCir(shifted, peak_index)


def _template(n_taps: int, peak_index: int) -> Tuple[np.ndarray, np.ndarray]:
    """Magnitudes and peak-relative phases of the ideal impairment-free pulse."""
    ideal = synthesize_cir(1.0, ImpairmentSignature.ideal(), noise_snr_db=None,
                           n_taps=n_taps)
    p = preprocess_cir(ideal, peak_index)
    mags = np.abs(p.taps)
    rel_phase = np.angle(p.taps * np.conj(p.taps[peak_index]))
    rel_phase[mags == 0.0] = 0.0
    return mags, rel_phase


_TEMPLATE_CACHE: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]] = {}


def extract_embedding(p: ProcessedCir) -> np.ndarray:
    """64-dimensional unit-norm fingerprint embedding.

    Features are magnitude and (template-magnitude weighted) phase deviations
    from the ideal pulse in a +-16-tap window around the peak; an
    impairment-free capture degenerates to the fixed fallback embedding e0.
    """
    n = len(p.taps)
    key = (n, p.peak_index)
    if key not in _TEMPLATE_CACHE:
        _TEMPLATE_CACHE[key] = _template(n, p.peak_index)
    tmpl_mag, tmpl_phase = _TEMPLATE_CACHE[key]
    idx = (np.arange(p.peak_index - EMBEDDING_WINDOW, p.peak_index + EMBEDDING_WINDOW)) % n
    mags = np.abs(p.taps)
    rel_phase = np.angle(p.taps * np.conj(p.taps[p.peak_index]))
    # down-weight taps without pulse support so off-pulse noise does not
    # dominate the embedding at realistic SNR
    w = 0.2 + 0.8 * tmpl_mag[idx]
    d_mag = (mags[idx] - tmpl_mag[idx]) * w
    d_phase = rel_phase[idx] - tmpl_phase[idx]
    d_phase = np.arctan2(np.sin(d_phase), np.cos(d_phase)) * tmpl_mag[idx]
    features = np.concatenate([d_mag, d_phase])
    norm = float(np.linalg.norm(features))
    if norm < 1e-9:
        e0 = np.zeros(EMBEDDING_DIM)
        e0[0] = 1.0
        return e0
    return features / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass
class EnrollmentRecord:
    device_id: int
    anchor: np.ndarray
    enrolled_at: SimTime
    sample_count: int


def enroll(
    device_id: int,
    embeddings: Sequence[np.ndarray],
    enrolled_at: SimTime = 0,
    min_samples: int = MIN_ENROLL_SAMPLES,
) -> EnrollmentRecord:
    """Build the trusted anchor embedding as the normalized mean of at least
    `min_samples` enrollment embeddings."""
    if len(embeddings) < min_samples:
        raise SecurityError(
            f"enrollment needs at least {min_samples} samples, got {len(embeddings)}"
        )
    mean = np.mean(np.asarray(embeddings, dtype=np.float64), axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-9:
        anchor = np.zeros(EMBEDDING_DIM)
        anchor[0] = 1.0
    else:
        anchor = mean / norm
    return EnrollmentRecord(device_id, anchor, enrolled_at, len(embeddings))


def reidentify(
    query: np.ndarray,
    record: EnrollmentRecord,
    threshold: float = DEFAULT_RFF_THRESHOLD,
) -> Tuple[bool, float]:
    """Compare a query embedding to the anchor; accept at or above threshold."""
    similarity = cosine_similarity(query, record.anchor)
    return similarity >= threshold, similarity


class EnrollmentRegistry:
    """Node-local store of enrollment records, persisted as one text line per
    device: id followed by 64 comma-separated floats."""

    def __init__(self):
        self._records: Dict[int, EnrollmentRecord] = {}

    def add(self, record: EnrollmentRecord) -> None:
        self._records[record.device_id] = record

    def get(self, device_id: int) -> Optional[EnrollmentRecord]:
        return self._records.get(device_id)

    def __len__(self) -> int:
        return len(self._records)

    def save(self, path: str) -> None:
        lines = []
        for device_id in sorted(self._records):
            rec = self._records[device_id]
            vec = ",".join(repr(float(v)) for v in rec.anchor)
            lines.append(f"{device_id} {vec}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path: str) -> "EnrollmentRegistry":
        reg = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                ident, vec = line.split(" ", 1)
                anchor = np.array([float(v) for v in vec.split(",")])
                reg.add(EnrollmentRecord(int(ident), anchor, 0, 0))
        return reg


class TokenBucket:
    """Per-link frame budget refilled at each superframe boundary."""

    def __init__(self, budget_per_superframe: int):
        self.budget = budget_per_superframe
        self.tokens = budget_per_superframe
        self._superframe = 0

    def refill(self, superframe: int) -> None:
        if superframe != self._superframe:
            self._superframe = superframe
            self.tokens = self.budget

    def try_consume(self, superframe: int) -> bool:
        self.refill(superframe)
        if self.tokens > 0:
            self.tokens -= 1
            return True
        return False


def enforce_policy(
    policy: KeyPolicy,
    measured_distance_m: Optional[float],
    frames_this_superframe: int,
    rff_verdict: Optional[bool] = None,
) -> Tuple[bool, str]:
    """Admission decision for one frame on a link.

    `measured_distance_m` must come from a valid (non-invalidated) range
    result; None means no proof of proximity exists.
    """
    if measured_distance_m is None:
        return False, "no-proof-of-proximity"
    if measured_distance_m > policy.max_distance_m:
        return False, "proximity"
    if frames_this_superframe >= policy.max_frames_per_superframe:
        return False, "rate"
    if policy.rff_required and rff_verdict is not True:
        return False, "rff"
    return True, "ok"
