"""Statistical secrecy maps over a spatial grid.

For each candidate transmitter cell (uplink), the legitimate SNR is the best
access-point association and the eavesdropper SNR the worst case over the
eavesdropper positions; the cell's value is the empirical epsilon-outage
secrecy rate, i.e. the largest rate the secrecy capacity exceeds with
probability at least 1 - epsilon, quantized to five discrete levels.

Shadowing draws derive solely from (seed, cell index, endpoint index), so
results are independent of evaluation schedule and act as common random
numbers across access-point counts: switching on an additional access point
never lowers any cell (the qualitative multi-AP improvement).  An
eavesdropper placed exactly at an access point reuses that access point's
draw stream, which pins the co-located case to rate zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

Position = Tuple[float, float, float]

LEVEL_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
MIN_DISTANCE_M = 0.1
_AP_STREAM = 0
_EVE_STREAM = 1


class SecrecyError(Exception):
    pass


@dataclass(frozen=True)
class PropagationModel:
    """Log-distance path loss with log-normal shadowing (d0 = 1 m).

    Stands in for the unspecified UWB channel statistics; any model exposing
    `mean_snr_db` can replace it.
    """

    pl0_db: float = 40.0
    exponent: float = 2.0
    sigma_db: float = 4.0
    tx_power_dbm: float = 0.0
    noise_floor_dbm: float = -85.0

    def __post_init__(self):
        if self.exponent <= 0:
            raise SecrecyError("path-loss exponent must be positive")
        if self.sigma_db < 0:
            raise SecrecyError("shadowing sigma must be non-negative")

    def mean_snr_db(self, tx: Position, rx: Position) -> float:
        d = max(math.dist(tx, rx), MIN_DISTANCE_M)
        return (
            self.tx_power_dbm
            - self.pl0_db
            - 10.0 * self.exponent * math.log10(d)
            - self.noise_floor_dbm
        )


def snr_at(
    tx: Position,
    rx: Position,
    model: PropagationModel,
    shadowing_db: float = 0.0,
) -> float:
    """SNR in dB for one link realization with the given shadowing draw."""
    return model.mean_snr_db(tx, rx) - shadowing_db


@dataclass(frozen=True)
class SecrecyScenario:
    access_points: Tuple[Position, ...]
    eavesdroppers: Tuple[Position, ...]
    epsilon: float
    grid_x: Tuple[float, float]
    grid_y: Tuple[float, float]
    resolution: float
    height: float = 1.0

    def __post_init__(self):
        if not self.access_points:
            raise SecrecyError("at least one access point required")
        if not (0.0 < self.epsilon < 1.0):
            raise SecrecyError("epsilon must lie strictly in (0, 1)")
        if self.resolution <= 0:
            raise SecrecyError("grid resolution must be positive")

    def cell_centers(self) -> List[Position]:
        xs = np.arange(self.grid_x[0] + self.resolution / 2, self.grid_x[1], self.resolution)
        ys = np.arange(self.grid_y[0] + self.resolution / 2, self.grid_y[1], self.resolution)
        if len(xs) == 0 or len(ys) == 0:
            raise SecrecyError("empty grid")
        return [(float(x), float(y), self.height) for y in ys for x in xs]

    def shape(self) -> Tuple[int, int]:
        nx = len(np.arange(self.grid_x[0] + self.resolution / 2, self.grid_x[1], self.resolution))
        ny = len(np.arange(self.grid_y[0] + self.resolution / 2, self.grid_y[1], self.resolution))
        return ny, nx


def empirical_outage_rate(secrecy_samples: np.ndarray, epsilon: float) -> float:
    """Largest rate r with P(Cs >= r) >= 1 - epsilon over the sample set."""
    ordered = np.sort(np.asarray(secrecy_samples, dtype=np.float64))
    index = int(math.floor(epsilon * len(ordered)))
    return float(ordered[min(index, len(ordered) - 1)])


def _shadowing(seed: int, cell_index: int, stream: int, endpoint: int, trials: int,
               sigma_db: float) -> np.ndarray:
    rng = np.random.default_rng((seed, cell_index, stream, endpoint))
    return rng.normal(0.0, sigma_db, trials)


def secrecy_capacity_samples(
    tx: Position,
    scenario: SecrecyScenario,
    model: PropagationModel,
    trials: int,
    seed: int,
    cell_index: int = 0,
) -> np.ndarray:
    """Monte Carlo secrecy capacity: Cs = max(0, log2(1+SNR_b) - log2(1+SNR_e))
    per trial, with best-AP association and worst-case eavesdropper."""
    if trials < 1:
        raise SecrecyError("at least one trial required")
    snr_b = np.full(trials, -np.inf)
    ap_draws = {}
    for k, ap in enumerate(scenario.access_points):
        draws = _shadowing(seed, cell_index, _AP_STREAM, k, trials, model.sigma_db)
        ap_draws[ap] = draws
        snr_b = np.maximum(snr_b, model.mean_snr_db(tx, ap) - draws)
    if scenario.eavesdroppers:
        snr_e = np.full(trials, -np.inf)
        for k, eve in enumerate(scenario.eavesdroppers):
            if eve in ap_draws:
                draws = ap_draws[eve]  # co-located: identical SNR draws
            else:
                draws = _shadowing(seed, cell_index, _EVE_STREAM, k, trials, model.sigma_db)
            snr_e = np.maximum(snr_e, model.mean_snr_db(tx, eve) - draws)
    else:
        snr_e = np.full(trials, -np.inf)
    cap_b = np.log2(1.0 + 10.0 ** (snr_b / 10.0))
    cap_e = np.log2(1.0 + 10.0 ** (snr_e / 10.0))
    return np.maximum(cap_b - cap_e, 0.0)


def outage_secrecy_rate(
    tx: Position,
    scenario: SecrecyScenario,
    model: PropagationModel,
    trials: int = 10000,
    seed: int = 0,
    cell_index: int = 0,
) -> float:
    if trials < 1000:
        raise SecrecyError("at least 1000 trials required")
    samples = secrecy_capacity_samples(tx, scenario, model, trials, seed, cell_index)
    return empirical_outage_rate(samples, scenario.epsilon)


def rate_to_level(rate: float, thresholds: Sequence[float] = LEVEL_THRESHOLDS) -> int:
    if rate < 0:
        raise SecrecyError("secrecy rate cannot be negative")
    return int(sum(rate >= t for t in thresholds))


@dataclass
class SecrecyMap:
    scenario: SecrecyScenario
    rates: np.ndarray   # shape (ny, nx)
    levels: np.ndarray  # shape (ny, nx), int 0..4

    def to_csv(self) -> str:
        """x, y, rate, level rows in cell order."""
        lines = ["x,y,rate,level"]
        cells = self.scenario.cell_centers()
        ny, nx = self.rates.shape
        for i, (x, y, _) in enumerate(cells):
            iy, ix = divmod(i, nx)
            lines.append(f"{x!r},{y!r},{self.rates[iy, ix]!r},{int(self.levels[iy, ix])}")
        return "\n".join(lines) + "\n"

    def to_pgm(self) -> str:
        """Plain PGM with the discrete level as the gray value."""
        ny, nx = self.levels.shape
        rows = [" ".join(str(int(v)) for v in self.levels[iy]) for iy in range(ny)]
        return f"P2\n{nx} {ny}\n{len(LEVEL_THRESHOLDS)}\n" + "\n".join(rows) + "\n"


def build_map(
    scenario: SecrecyScenario,
    model: PropagationModel,
    seed: int = 0,
    trials: int = 10000,
    jobs: int = 1,
) -> SecrecyMap:
    """Evaluate the outage secrecy rate for a transmitter at every grid cell.

    Cells are independent and each derives its random stream solely from
    (seed, cell index), so results do not depend on evaluation order or the
    number of workers."""
    cells = scenario.cell_centers()
    ny, nx = scenario.shape()
    rates = np.zeros(ny * nx)

    def evaluate(i: int) -> float:
        return outage_secrecy_rate(cells[i], scenario, model, trials, seed, cell_index=i)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for i, rate in enumerate(pool.map(evaluate, range(len(cells)))):
                rates[i] = rate
    else:
        for i in range(len(cells)):
            rates[i] = evaluate(i)
    rates = rates.reshape(ny, nx)
    levels = np.vectorize(rate_to_level)(rates)
    return SecrecyMap(scenario, rates, levels)


def rates_from_snr_samples(
    snr_bob_db: np.ndarray, snr_eve_db: np.ndarray, epsilon: float
) -> float:
    """Outage secrecy rate from measured per-cell SNR sample pairs (the
    measurement-driven alternative to the propagation model)."""
    cap_b = np.log2(1.0 + 10.0 ** (np.asarray(snr_bob_db) / 10.0))
    cap_e = np.log2(1.0 + 10.0 ** (np.asarray(snr_eve_db) / 10.0))
    return empirical_outage_rate(np.maximum(cap_b - cap_e, 0.0), epsilon)


def load_snr_samples_csv(path: str) -> dict:
    """Read measured samples: one `x,y,snr_bob_db,snr_eve_db` row per trial."""
    cells: dict = {}
    with open(path) as fh:
        header = fh.readline()
        if header.strip() != "x,y,snr_bob_db,snr_eve_db":
            raise SecrecyError(f"{path}: unexpected header {header.strip()!r}")
        for line in fh:
            if not line.strip():
                continue
            x, y, b, e = line.split(",")
            cells.setdefault((float(x), float(y)), ([], []))
            cells[(float(x), float(y))][0].append(float(b))
            cells[(float(x), float(y))][1].append(float(e))
    return cells
