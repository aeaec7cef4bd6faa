"""Command-line front end: validate scenarios, run test modes, sweep parameters.

Commands
--------
validate PATH            parse + validate a scenario file
run                      one test mode for one role; writes trace/report files
sweep                    comm or sensor sweep; writes a table CSV
roles PATH               list the realizable roles of a scenario

Exit codes: 0 = pass, 1 = fail (validation error / fail verdict), 2 = usage,
I/O or simulation error. Run configuration comes from an optional JSON file
(--config) with command-line flags taking precedence. All outputs are
written atomically into the output directory (--out, defaulting to the
PLATOONSIM_OUT environment variable or ./platoonsim_out).
"""

from __future__ import annotations

import argparse
import io
import json
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .assessment import (
    RunSettings,
    Thresholds,
    extract_input_log,
    run_closed_loop,
    run_comm_test,
    run_open_loop,
    run_sensor_test,
)
from .channel import ChannelConfig
from .protocol import Role
from .scenario import (
    EnvironmentConditions,
    Lighting,
    RoleNotRealizable,
    Scenario,
    ScenarioSyntaxError,
    ScenarioValidationError,
    parse_scenario,
    realizable_roles,
)
from .vehicle import ControllerGains, FallbackParams

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_ERROR = 2

MODES = ("closed", "open", "comm", "sensor")

_ROLE_NAMES = {r.name.lower(): r for r in Role}


@dataclass
class RunConfig:
    """Fully resolved configuration of one CLI run."""

    scenario_path: Path
    role: Role
    mode: str
    out_dir: Path
    settings: RunSettings
    sweep: list[dict]            # comm mode: channel override dicts, one per row
    conditions: list[dict]       # sensor mode: environment override dicts


def _load_scenario(path: Path) -> Scenario:
    text = path.read_text()
    return parse_scenario(text)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _merge_settings(config: dict, args) -> RunSettings:
    """Config file values first, command-line flags win."""
    gains_cfg = dict(config.get("gains", {}))
    for key in ("kp", "kd", "ff"):
        flag = getattr(args, key, None)
        if flag is not None:
            gains_cfg[key] = flag
    fallback_cfg = dict(config.get("fallback", {}))
    if getattr(args, "fallback_timeout", None) is not None:
        fallback_cfg["timeout"] = args.fallback_timeout
    if getattr(args, "fallback_thw_increment", None) is not None:
        fallback_cfg["thw_increment"] = args.fallback_thw_increment
    thr_cfg = dict(config.get("thresholds", {}))
    if getattr(args, "min_ttc", None) is not None:
        thr_cfg["min_ttc"] = args.min_ttc
    if getattr(args, "min_thw", None) is not None:
        thr_cfg["min_thw"] = args.min_thw

    seed = config.get("seed", 0)
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    dt = config.get("dt", 0.01)
    if getattr(args, "dt", None) is not None:
        dt = args.dt
    duration = config.get("duration")
    if getattr(args, "duration", None) is not None:
        duration = args.duration

    return RunSettings(
        seed=int(seed), dt=float(dt),
        gains=ControllerGains(**gains_cfg),
        fallback=FallbackParams(**fallback_cfg),
        thresholds=Thresholds(**thr_cfg),
        duration_override=duration,
    )


def _channel_override(scenario: Scenario, config: dict, args) -> Optional[ChannelConfig]:
    overrides = dict(config.get("channel", {}))
    for flag, key in (("latency", "latency_mean"), ("jitter", "latency_jitter"),
                      ("loss", "loss_prob")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if not overrides:
        return None
    return replace(scenario.channel, **overrides)


def _normalize_sweep(block) -> list[dict]:
    """Accept {"field": [v0, v1, ...]} (zipped) or a list of override dicts."""
    if block is None:
        return []
    if isinstance(block, list):
        return [dict(row) for row in block]
    if isinstance(block, dict):
        lengths = {len(v) for v in block.values()}
        if not block or lengths == {0}:
            return []
        if len(lengths) != 1:
            raise ValueError("sweep lists must all have the same length")
        n = lengths.pop()
        return [{k: v[i] for k, v in block.items()} for i in range(n)]
    raise ValueError("sweep block must be a dict of lists or a list of dicts")


def _build_run_config(args) -> tuple[RunConfig, Scenario]:
    config = {}
    if args.config is not None:
        config = json.loads(Path(args.config).read_text())
    scenario_path = Path(args.scenario)
    scenario = _load_scenario(scenario_path)

    role = _ROLE_NAMES[args.role.lower()] if args.role else scenario.ego_role_under_test
    mode = args.mode or config.get("mode", "closed")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    out_dir = Path(args.out) if args.out else Path(
        os.environ.get("PLATOONSIM_OUT", "platoonsim_out"))
    settings = _merge_settings(config, args)
    settings = replace(settings,
                       channel_override=_channel_override(scenario, config, args))
    return RunConfig(
        scenario_path=scenario_path, role=role, mode=mode, out_dir=out_dir,
        settings=settings,
        sweep=_normalize_sweep(config.get("sweep")),
        conditions=[dict(c) for c in config.get("conditions", [])],
    ), scenario


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    path = Path(args.path)
    try:
        text = path.read_text()
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        parse_scenario(text)
    except ScenarioSyntaxError as exc:
        print(f"{path}:{exc.line}: syntax error: {exc.message}", file=sys.stderr)
        return EXIT_FAIL
    except ScenarioValidationError as exc:
        for line, message in exc.errors:
            print(f"{path}:{line}: {message}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_PASS


def cmd_roles(args) -> int:
    path = Path(args.path)
    try:
        scenario = _load_scenario(path)
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ScenarioSyntaxError, ScenarioValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for role in realizable_roles(scenario):
        print(role.name.lower())
    return EXIT_PASS


def _report_text(report) -> str:
    lines = [
        f"scenario:        {report.scenario_name}",
        f"role under test: {report.role.name.lower()} (truck {report.vut_id})",
        f"collision:       {report.collision}",
        f"min gap:         {report.min_gap:.3f} m",
        f"min THW:         {'n/a' if report.min_thw is None else f'{report.min_thw:.3f} s'}",
        f"min TTC:         {'inf' if math.isinf(report.min_ttc) else f'{report.min_ttc:.3f} s'}",
        f"max decel used:  {report.max_decel_used:.3f} m/s^2 (capability {report.vut_max_decel})",
        f"string ratios:   {', '.join(f'{r:.3f}' for r in report.string_stability_ratios)}",
        f"comm:            sent {report.comm.sent}, delivered {report.comm.delivered}, "
        f"dropped {report.comm.dropped}",
        f"verdict:         {report.verdict}",
    ]
    return "\n".join(lines) + "\n"


def _write_run_outputs(out_dir: Path, trace, report) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / "trace.csv", trace.to_trace_csv())
    _atomic_write(out_dir / "messages.csv", trace.to_message_csv())
    _atomic_write(out_dir / "report.json", report.to_json().encode())
    _atomic_write(out_dir / "report.txt", _report_text(report).encode())


def _comm_sweep_csv(rows) -> bytes:
    buf = io.StringIO()
    buf.write("row,seed,latency_mean,latency_jitter,loss_prob,congestion_extra_latency,"
              "congestion_threshold,sent,delivered,dropped,mean_latency,"
              "max_msg_age_used,fallback_entered_at,min_gap,min_thw,min_ttc,verdict\n")
    for i, row in enumerate(rows):
        c, r = row.config, row.report
        buf.write(",".join(str(x) for x in (
            i, row.seed, c.latency_mean, c.latency_jitter, c.loss_prob,
            c.congestion_extra_latency, c.congestion_threshold,
            row.comm.sent, row.comm.delivered, row.comm.dropped,
            "" if row.comm.mean_latency is None else row.comm.mean_latency,
            "" if row.comm.max_msg_age_used is None else row.comm.max_msg_age_used,
            "" if row.fallback_entered_at is None else row.fallback_entered_at,
            r.min_gap, "" if r.min_thw is None else r.min_thw, r.min_ttc,
            r.verdict)))
        buf.write("\n")
    return buf.getvalue().encode()


def _sensor_sweep_csv(rows) -> bytes:
    buf = io.StringIO()
    buf.write("row,visibility_factor,lighting,rms_range_error,n_samples,"
              "cut_in_detection_latency,min_gap,min_thw,min_ttc,verdict\n")
    for i, row in enumerate(rows):
        cond, r = row.conditions, row.report
        buf.write(",".join(str(x) for x in (
            i, cond.visibility_factor, cond.lighting.value,
            row.rms_range_error, row.n_samples,
            "" if row.cut_in_detection_latency is None else row.cut_in_detection_latency,
            r.min_gap, "" if r.min_thw is None else r.min_thw, r.min_ttc,
            r.verdict)))
        buf.write("\n")
    return buf.getvalue().encode()


def _run_comm_sweep(cfg: RunConfig, scenario: Scenario) -> int:
    if not cfg.sweep:
        print("error: comm mode requires a non-empty sweep block in --config",
              file=sys.stderr)
        return EXIT_ERROR
    base = cfg.settings.channel_override or scenario.channel
    sweep_cfgs = [replace(base, **row) for row in cfg.sweep]
    settings = replace(cfg.settings, channel_override=None)
    rows = run_comm_test(scenario, cfg.role, sweep_cfgs, settings)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(cfg.out_dir / "sweep.csv", _comm_sweep_csv(rows))
    for i, row in enumerate(rows):
        _atomic_write(cfg.out_dir / f"report_row{i}.json", row.report.to_json().encode())
    return EXIT_PASS if all(r.report.verdict == "pass" for r in rows) else EXIT_FAIL


def _run_sensor_sweep(cfg: RunConfig, scenario: Scenario) -> int:
    if not cfg.conditions:
        print("error: sensor mode requires a non-empty conditions block in --config",
              file=sys.stderr)
        return EXIT_ERROR
    conds = []
    for row in cfg.conditions:
        kwargs = dict(row)
        if "lighting" in kwargs:
            kwargs["lighting"] = Lighting(str(kwargs["lighting"]).lower())
        conds.append(replace(scenario.environment, **kwargs))
    rows = run_sensor_test(scenario, cfg.role, conds, cfg.settings)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(cfg.out_dir / "sensor.csv", _sensor_sweep_csv(rows))
    return EXIT_PASS if all(r.report.verdict == "pass" for r in rows) else EXIT_FAIL


def cmd_run(args) -> int:
    try:
        cfg, scenario = _build_run_config(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ScenarioSyntaxError, ScenarioValidationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        if cfg.mode == "closed":
            trace, report = run_closed_loop(scenario, cfg.role, cfg.settings)
            _write_run_outputs(cfg.out_dir, trace, report)
            return EXIT_PASS if report.verdict == "pass" else EXIT_FAIL
        if cfg.mode == "open":
            trace, report = run_closed_loop(scenario, cfg.role, cfg.settings)
            result = run_open_loop(scenario, cfg.role, extract_input_log(trace))
            _write_run_outputs(cfg.out_dir, trace, report)
            payload = {
                "consistency_verdict": result.consistency_verdict,
                "first_divergence_tick": result.first_divergence,
                "n_ticks": len(result.setpoints),
            }
            _atomic_write(cfg.out_dir / "openloop.json",
                          json.dumps(payload, indent=2, sort_keys=True).encode())
            return EXIT_PASS if result.consistency_verdict == "pass" else EXIT_FAIL
        if cfg.mode == "comm":
            return _run_comm_sweep(cfg, scenario)
        return _run_sensor_sweep(cfg, scenario)
    except RoleNotRealizable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def cmd_sweep(args) -> int:
    if args.mode is None:
        args.mode = "comm"
    if args.mode not in ("comm", "sensor"):
        print("error: sweep supports --mode comm or sensor", file=sys.stderr)
        return EXIT_ERROR
    return cmd_run(args)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", required=True, help="path to a .scn file")
    p.add_argument("--role", choices=sorted(_ROLE_NAMES),
                   help="role under test (default: the scenario's)")
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--out", help="output directory (default $PLATOONSIM_OUT)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--duration", type=float, help="override the scenario horizon")
    p.add_argument("--kp", type=float)
    p.add_argument("--kd", type=float)
    p.add_argument("--ff", type=float)
    p.add_argument("--fallback-timeout", type=float)
    p.add_argument("--fallback-thw-increment", type=float)
    p.add_argument("--min-ttc", type=float)
    p.add_argument("--min-thw", type=float)
    p.add_argument("--latency", type=float, help="channel latency_mean override")
    p.add_argument("--jitter", type=float, help="channel latency_jitter override")
    p.add_argument("--loss", type=float, help="channel loss_prob override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="platoonsim",
        description="Deterministic V2V truck-platooning simulator and safety harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_val = sub.add_parser("validate", help="parse and validate a scenario file")
    p_val.add_argument("path")
    p_val.set_defaults(func=cmd_validate)

    p_roles = sub.add_parser("roles", help="list realizable roles of a scenario")
    p_roles.add_argument("path")
    p_roles.set_defaults(func=cmd_roles)

    p_run = sub.add_parser("run", help="run one test mode for one role")
    _add_run_flags(p_run)
    p_run.add_argument("--mode", choices=MODES, default="closed")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="comm or sensor parameter sweep")
    _add_run_flags(p_sweep)
    p_sweep.add_argument("--mode", choices=("comm", "sensor"))
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
