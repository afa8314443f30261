"""Command-line entry point: run / validate / secrecy-map / schedule-dump.

Exit codes: 0 success, 2 configuration error, 3 runtime invariant violation.
All output files are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import io
import os
import sys
from typing import List, Optional

from . import mac, mesh
from .config import ConfigError, ScenarioConfig, load_config, validate, write_text_atomic
from .engine import SimulationError
from .netsim import Network, metrics_to_json
from .secrecy import SecrecyScenario, build_map

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load(path: str, args) -> ScenarioConfig:
    cfg = load_config(path)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.duration is not None:
        cfg.duration_s = args.duration
    return cfg


def _out_path(args, configured: Optional[str]) -> Optional[str]:
    if configured is None:
        return None
    if os.path.isabs(configured):
        return configured
    return os.path.join(args.out_dir, configured)


def cmd_run(args) -> int:
    try:
        cfg = _load(args.config, args)
    except ConfigError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    trace_path = _out_path(args, cfg.trace_path)
    trace_buf = io.StringIO() if trace_path else None
    try:
        net = Network(cfg, trace_fh=trace_buf)
        metrics = net.run()
    except SimulationError as exc:
        print(f"runtime invariant violation: {exc}", file=sys.stderr)
        if trace_buf is not None and trace_path:
            write_text_atomic(trace_path, trace_buf.getvalue())
        return EXIT_RUNTIME
    if trace_path:
        write_text_atomic(trace_path, trace_buf.getvalue())
    metrics_path = _out_path(args, cfg.metrics_path)
    if metrics_path:
        write_text_atomic(metrics_path, metrics_to_json(metrics))
    if not args.quiet:
        ratio = metrics["delivery_ratio"]
        print(f"superframes: {metrics['superframes']}")
        print(f"frames tx/delivered/corrupted: {metrics['frames_tx']}"
              f"/{metrics['frames_delivered']}/{metrics['frames_corrupted']}")
        print(f"delivery ratio: {'n/a' if ratio is None else f'{ratio:.3f}'}")
        print(f"ranging sessions ok/invalidated/timeout: {metrics['sessions_ok']}"
              f"/{metrics['sessions_invalidated']}/{metrics['sessions_timeout']}")
        print(f"attack detections: {metrics['attack_detections']}")
        print(f"policy denials: {sum(metrics['policy_denials'].values())}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        with open(args.config) as fh:
            import json

            doc = json.load(fh)
    except OSError as exc:
        print(f"config error: {args.config}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .config import parse_config

    try:
        cfg = parse_config(doc)
    except ConfigError as exc:
        for violation in exc.violations:
            print(f"violation: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    violations = validate(cfg)
    if violations:
        for violation in violations:
            print(f"violation: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.quiet:
        print("ok")
    return EXIT_OK


def cmd_secrecy_map(args) -> int:
    try:
        cfg = _load(args.config, args)
    except ConfigError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.secrecy is None:
        print("config error: secrecy: section missing", file=sys.stderr)
        return EXIT_CONFIG
    s = cfg.secrecy
    scenario = SecrecyScenario(
        access_points=tuple(s.access_points),
        eavesdroppers=tuple(s.eavesdroppers),
        epsilon=s.epsilon,
        grid_x=s.grid.x,
        grid_y=s.grid.y,
        resolution=s.grid.resolution,
        height=s.grid.height,
    )
    smap = build_map(scenario, s.model, seed=cfg.seed, trials=s.trials, jobs=args.jobs)
    write_text_atomic(_out_path(args, s.map_csv), smap.to_csv())
    if s.map_pgm:
        write_text_atomic(_out_path(args, s.map_pgm), smap.to_pgm())
    if not args.quiet:
        print(f"cells: {smap.rates.size}")
        print(f"rate min/max: {smap.rates.min():.3f}/{smap.rates.max():.3f}")
    return EXIT_OK


def cmd_schedule_dump(args) -> int:
    try:
        cfg = _load(args.config, args)
    except ConfigError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    leaders = sorted(n.id for n in cfg.nodes if n.role == mesh.LEADER)
    schedule = mac.build_schedule(leaders, cfg.slot_length_us)
    sys.stdout.write(schedule.dump())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uwbmesh",
                                     description="sovereign UWB data network simulator")
    parser.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    parser.add_argument("--duration", type=float, default=None,
                        help="override the scenario duration (seconds)")
    parser.add_argument("--out-dir", default=".", help="directory for output artifacts")
    parser.add_argument("--quiet", action="store_true", help="suppress the summary")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel workers for secrecy-map cells")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("run", cmd_run),
        ("validate", cmd_validate),
        ("secrecy-map", cmd_secrecy_map),
        ("schedule-dump", cmd_schedule_dump),
    ):
        p = sub.add_parser(name)
        p.add_argument("config", help="scenario JSON file")
        p.set_defaults(fn=fn)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
