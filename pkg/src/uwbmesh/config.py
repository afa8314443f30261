"""Scenario configuration: JSON loading, defaults and invariant validation.

The schema is documented in the README; validation reports every violation
with a dotted field path so a bad config never starts a run.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

from . import mesh
from .secrecy import PropagationModel

REMOTE_DST = "remote"


class ConfigError(Exception):
    def __init__(self, violations: List[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


@dataclass
class NodeCfg:
    id: int
    role: str
    zone: int
    position: Tuple[float, float, float]
    boot_uptime_s: float = 0.0
    policy: Optional[Dict[str, Any]] = None


@dataclass
class FlowCfg:
    src: int
    dst: Union[int, str]
    size_bytes: int
    period_ms: float
    start_ms: float = 0.0


@dataclass
class AttackCfg:
    kind: str
    magnitude_ns: float
    link: Tuple[int, int]
    start_ms: float = 0.0


@dataclass
class FailureCfg:
    node: int
    at_ms: float


@dataclass
class GridCfg:
    x: Tuple[float, float]
    y: Tuple[float, float]
    resolution: float
    height: float = 1.0


@dataclass
class SecrecyCfg:
    access_points: List[Tuple[float, float, float]]
    eavesdroppers: List[Tuple[float, float, float]]
    epsilon: float
    grid: GridCfg
    trials: int = 10000
    model: PropagationModel = field(default_factory=PropagationModel)
    map_csv: str = "secrecy_map.csv"
    map_pgm: Optional[str] = None


@dataclass
class ScenarioConfig:
    seed: int = 1
    duration_s: float = 10.0
    slot_length_us: int = 1000
    guard_us: float = 50.0
    max_range_m: float = 30.0
    datarate_mbps: float = 6.8
    preamble_us: float = 64.0
    shared_channel: bool = False
    max_drift_ppm: float = 20.0
    tau_ns: float = 1.0
    toa_sigma_ns: float = 0.0
    cfo_sigma_ppm: float = 0.0
    reply_delay_us: float = 200.0
    policy: Dict[str, Any] = field(default_factory=dict)
    nodes: List[NodeCfg] = field(default_factory=list)
    flows: List[FlowCfg] = field(default_factory=list)
    attacks: List[AttackCfg] = field(default_factory=list)
    failures: List[FailureCfg] = field(default_factory=list)
    trace_path: Optional[str] = None
    metrics_path: Optional[str] = None
    secrecy: Optional[SecrecyCfg] = None

    def node_ids(self) -> List[int]:
        return [n.id for n in self.nodes]


def _pos(value: Any, path: str, violations: List[str]) -> Tuple[float, float, float]:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 3
        or not all(isinstance(c, (int, float)) for c in value)
    ):
        violations.append(f"{path}: position must be [x, y, z] in meters")
        return (0.0, 0.0, 0.0)
    return tuple(float(c) for c in value)


def parse_config(doc: Dict[str, Any]) -> ScenarioConfig:
    """Map a JSON document onto a ScenarioConfig; structural problems raise
    ConfigError with per-field messages."""
    violations: List[str] = []
    cfg = ScenarioConfig()
    cfg.seed = int(doc.get("seed", cfg.seed))
    cfg.duration_s = float(doc.get("duration_s", cfg.duration_s))

    sf = doc.get("superframe", {})
    cfg.slot_length_us = int(sf.get("slot_length_us", cfg.slot_length_us))
    cfg.guard_us = float(sf.get("guard_us", cfg.guard_us))

    med = doc.get("medium", {})
    cfg.max_range_m = float(med.get("max_range_m", cfg.max_range_m))
    cfg.datarate_mbps = float(med.get("datarate_mbps", cfg.datarate_mbps))
    cfg.preamble_us = float(med.get("preamble_us", cfg.preamble_us))
    cfg.shared_channel = bool(med.get("shared_channel", cfg.shared_channel))

    clk = doc.get("clock", {})
    cfg.max_drift_ppm = float(clk.get("max_drift_ppm", cfg.max_drift_ppm))

    rng = doc.get("ranging", {})
    cfg.tau_ns = float(rng.get("tau_ns", cfg.tau_ns))
    cfg.toa_sigma_ns = float(rng.get("toa_sigma_ns", cfg.toa_sigma_ns))
    cfg.cfo_sigma_ppm = float(rng.get("cfo_sigma_ppm", cfg.cfo_sigma_ppm))
    cfg.reply_delay_us = float(rng.get("reply_delay_us", cfg.reply_delay_us))

    cfg.policy = dict(doc.get("policy", {}))

    for i, nd in enumerate(doc.get("nodes", [])):
        path = f"nodes[{i}]"
        if "id" not in nd or "role" not in nd or "position" not in nd:
            violations.append(f"{path}: requires id, role and position")
            continue
        cfg.nodes.append(
            NodeCfg(
                id=int(nd["id"]),
                role=str(nd["role"]),
                zone=int(nd.get("zone", 0)),
                position=_pos(nd["position"], f"{path}.position", violations),
                boot_uptime_s=float(nd.get("boot_uptime_s", 0.0)),
                policy=nd.get("policy"),
            )
        )

    for i, fl in enumerate(doc.get("flows", [])):
        path = f"flows[{i}]"
        try:
            dst = fl["dst"]
            cfg.flows.append(
                FlowCfg(
                    src=int(fl["src"]),
                    dst=dst if dst == REMOTE_DST else int(dst),
                    size_bytes=int(fl["size_bytes"]),
                    period_ms=float(fl.get("period_ms", 100.0)),
                    start_ms=float(fl.get("start_ms", 0.0)),
                )
            )
        except (KeyError, TypeError, ValueError):
            violations.append(f"{path}: requires src, dst and size_bytes")

    for i, at in enumerate(doc.get("attacks", [])):
        path = f"attacks[{i}]"
        try:
            link = at["link"]
            cfg.attacks.append(
                AttackCfg(
                    kind=str(at["kind"]),
                    magnitude_ns=float(at["magnitude_ns"]),
                    link=(int(link[0]), int(link[1])),
                    start_ms=float(at.get("start_ms", 0.0)),
                )
            )
        except (KeyError, TypeError, ValueError, IndexError):
            violations.append(f"{path}: requires kind, magnitude_ns and link [a, b]")

    for i, fd in enumerate(doc.get("failures", [])):
        path = f"failures[{i}]"
        try:
            cfg.failures.append(FailureCfg(node=int(fd["node"]), at_ms=float(fd["at_ms"])))
        except (KeyError, TypeError, ValueError):
            violations.append(f"{path}: requires node and at_ms")

    outputs = doc.get("outputs", {})
    cfg.trace_path = outputs.get("trace")
    cfg.metrics_path = outputs.get("metrics")

    if "secrecy" in doc:
        sec = doc["secrecy"]
        try:
            grid = sec["grid"]
            model = sec.get("model", {})
            cfg.secrecy = SecrecyCfg(
                access_points=[_pos(p, "secrecy.access_points", violations) for p in sec["access_points"]],
                eavesdroppers=[_pos(p, "secrecy.eavesdroppers", violations) for p in sec.get("eavesdroppers", [])],
                epsilon=float(sec["epsilon"]),
                grid=GridCfg(
                    x=(float(grid["x"][0]), float(grid["x"][1])),
                    y=(float(grid["y"][0]), float(grid["y"][1])),
                    resolution=float(grid["resolution"]),
                    height=float(grid.get("height", 1.0)),
                ),
                trials=int(sec.get("trials", 10000)),
                model=PropagationModel(
                    pl0_db=float(model.get("pl0_db", 40.0)),
                    exponent=float(model.get("exponent", 2.0)),
                    sigma_db=float(model.get("sigma_db", 4.0)),
                    tx_power_dbm=float(model.get("tx_power_dbm", 0.0)),
                    noise_floor_dbm=float(model.get("noise_floor_dbm", -85.0)),
                ),
                map_csv=str(sec.get("map_csv", "secrecy_map.csv")),
                map_pgm=sec.get("map_pgm"),
            )
        except (KeyError, TypeError, ValueError, IndexError):
            violations.append("secrecy: requires access_points, epsilon and grid {x, y, resolution}")

    if violations:
        raise ConfigError(violations)
    return cfg


def validate(cfg: ScenarioConfig) -> List[str]:
    """Check every scenario invariant without running; returns violations."""
    v: List[str] = []
    ids = cfg.node_ids()
    seen = set()
    for i, node in enumerate(cfg.nodes):
        if node.id in seen:
            v.append(f"nodes[{i}].id: duplicate id {node.id}")
        seen.add(node.id)
        if node.role not in mesh.ROLE_CAPS:
            v.append(f"nodes[{i}].role: unknown role {node.role!r}")
        if not (0 <= node.id <= 0xFFFE):
            v.append(f"nodes[{i}].id: {node.id} outside the 16-bit short address range")
    if not cfg.nodes:
        v.append("nodes: at least one node required")

    zones = sorted({n.zone for n in cfg.nodes})
    for zone in zones:
        leaders = [n for n in cfg.nodes if n.zone == zone and n.role == mesh.LEADER]
        if not leaders:
            v.append(f"zone {zone}: zone lacks leader")
        elif len(leaders) > 1:
            v.append(f"zone {zone}: multiple leaders configured (one per zone supported)")

    superframe_us = 100_000
    if cfg.slot_length_us <= 0 or superframe_us % cfg.slot_length_us != 0:
        v.append(f"superframe.slot_length_us: {cfg.slot_length_us} does not divide 100 ms")
    if cfg.guard_us < 0 or 2 * cfg.guard_us >= cfg.slot_length_us:
        v.append("superframe.guard_us: guard leaves no usable slot time")
    if cfg.tau_ns <= 0:
        v.append("ranging.tau_ns: must be positive")

    known = set(ids)
    border_exists = any(n.role == mesh.BORDER for n in cfg.nodes)
    for i, flow in enumerate(cfg.flows):
        if flow.src not in known:
            v.append(f"flows[{i}].src: unknown node {flow.src}")
        if flow.dst == REMOTE_DST:
            if not border_exists:
                v.append(f"flows[{i}].dst: remote egress requires a border node")
        elif flow.dst not in known:
            v.append(f"flows[{i}].dst: unknown node {flow.dst}")
        if flow.size_bytes <= 0:
            v.append(f"flows[{i}].size_bytes: must be positive")
    for i, attack in enumerate(cfg.attacks):
        if attack.kind not in ("sts_advance", "phy_delay"):
            v.append(f"attacks[{i}].kind: unknown kind {attack.kind!r}")
        if attack.magnitude_ns <= 0:
            v.append(f"attacks[{i}].magnitude_ns: must be positive")
        for end in attack.link:
            if end not in known:
                v.append(f"attacks[{i}].link: unknown node {end}")
    for i, failure in enumerate(cfg.failures):
        if failure.node not in known:
            v.append(f"failures[{i}].node: unknown node {failure.node}")

    if cfg.secrecy is not None:
        s = cfg.secrecy
        if not s.access_points:
            v.append("secrecy.access_points: at least one access point required")
        if not (0.0 < s.epsilon < 1.0):
            v.append("secrecy.epsilon: must lie strictly in (0, 1)")
        if s.grid.resolution <= 0:
            v.append("secrecy.grid.resolution: must be positive")
        if s.trials < 1000:
            v.append("secrecy.trials: at least 1000 trials required")
    return v


def load_config(path: str) -> ScenarioConfig:
    """Read, parse and semantically validate a scenario file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"])
    cfg = parse_config(doc)
    violations = validate(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


def write_text_atomic(path: str, data: str) -> None:
    """Write via a temp file and rename so interrupted runs never leave
    truncated outputs."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
