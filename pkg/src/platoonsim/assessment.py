"""Per-role safety assessment: the four test modes and trace metrics.

A closed-loop run drives every truck's decision-and-control logic, the
channel and the vehicle dynamics over the scenario horizon and records a
complete trace (kinematics, commands, message log, event firings) plus the
full input log of the vehicle under test. The other modes build on it:

* open loop replays the recorded inputs through the control logic alone and
  checks set points and outgoing messages bit-for-bit,
* the communication test sweeps channel configurations,
* the sensor test sweeps environment conditions against ground truth.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .channel import Channel, ChannelConfig
from .protocol import (
    ControlMessage,
    JoinRequest,
    JoinResponse,
    ManagementMessage,
    Message,
    PlatoonConfig,
    Role,
    encode_message,
)
from .scenario import (
    SCRIPTED_ID_BASE,
    EventKind,
    FiredEvent,
    Scenario,
    fire_events,
    instantiate_for_role,
)
from .vehicle import (
    DEFAULT_FALLBACK,
    DEFAULT_GAINS,
    AccelCommand,
    ControllerGains,
    ControllerMode,
    DclInputs,
    DclState,
    FallbackParams,
    Measurement,
    TruckParams,
    TruckState,
    VehicleView,
    dcl_step,
    sensor_measure,
    step_dynamics,
)


class InputLogGap(ValueError):
    """The recorded input log does not cover every tick."""


@dataclass(frozen=True)
class Thresholds:
    """Pass/fail limits applied to the trace metrics (all configurable)."""

    min_ttc: float = 2.0       # s
    min_thw: float = 0.4       # s, transient floor during maneuvers


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    dt: float = 0.01
    gains: ControllerGains = DEFAULT_GAINS
    fallback: FallbackParams = DEFAULT_FALLBACK
    thresholds: Thresholds = Thresholds()
    channel_override: Optional[ChannelConfig] = None
    duration_override: Optional[float] = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass
class TickInputs:
    """Everything the vehicle under test consumed in one tick."""

    meas: Measurement
    messages: tuple[Message, ...]
    x: float
    v: float
    a: float
    safe: bool
    pending_join: Optional[tuple[int, JoinRequest]]
    platoon_thw_cmd: float


@dataclass
class InputLog:
    """Self-contained replayable record of the vehicle under test's inputs."""

    scenario_name: str
    role: Role
    vut_id: int
    settings: RunSettings
    n_ticks: int
    ticks: list[Optional[TickInputs]]
    expected_a_cmd: list[float]
    expected_out: list[tuple[bytes, ...]]


@dataclass
class MessageRecord:
    t_send: float
    source: int
    destination: int
    recipient: int
    payload: str
    seq: Optional[int]
    t_deliver: float        # inf when dropped
    dropped: bool
    size: int


@dataclass
class Trace:
    """Complete per-tick record of one closed-loop run.

    Arrays have shape (n_ticks, n_vehicles); a NaN row means the vehicle did
    not exist yet at that tick. Column order is ``vehicle_ids``.
    """

    scenario_name: str
    role: Role
    vut_id: int
    vut_max_decel: float
    dt: float
    n_ticks: int
    vehicle_ids: list[int]
    truck_ids: list[int]          # all DCL-driven trucks incl. a candidate
    platoon_ids: list[int]        # initial platoon members, front to rear
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    a_cmd: np.ndarray
    gap: np.ndarray
    thw: np.ndarray
    ttc: np.ndarray
    op_age: np.ndarray
    role_code: np.ndarray
    mode_code: np.ndarray
    present: np.ndarray
    messages: list[MessageRecord] = field(default_factory=list)
    events: list[FiredEvent] = field(default_factory=list)
    vut_log: Optional[InputLog] = None

    def column(self, vid: int) -> int:
        return self.vehicle_ids.index(vid)

    # -- CSV export ---------------------------------------------------------

    def to_trace_csv(self) -> bytes:
        buf = io.StringIO()
        buf.write("t,vehicle_id,kind,role,mode,x_front,v,a,a_cmd,gap,thw,ttc,op_msg_age\n")
        truck_set = set(self.truck_ids)
        for k in range(self.n_ticks):
            t = k * self.dt
            for j, vid in enumerate(self.vehicle_ids):
                if not self.present[k, j]:
                    continue
                kind = "truck" if vid in truck_set else "scripted"
                role = Role(int(self.role_code[k, j])).name.lower() \
                    if self.role_code[k, j] >= 0 else ""
                mode = ControllerMode(int(self.mode_code[k, j])).name.lower() \
                    if self.mode_code[k, j] >= 0 else ""
                buf.write(",".join((
                    _fmt_float(t), str(vid), kind, role, mode,
                    _fmt_float(self.x[k, j]), _fmt_float(self.v[k, j]),
                    _fmt_float(self.a[k, j]), _fmt_float(self.a_cmd[k, j]),
                    _fmt_float(self.gap[k, j]), _fmt_float(self.thw[k, j]),
                    _fmt_float(self.ttc[k, j]), _fmt_float(self.op_age[k, j]))))
                buf.write("\n")
        return buf.getvalue().encode()

    def to_message_csv(self) -> bytes:
        buf = io.StringIO()
        buf.write("t_send,source,destination,recipient,payload,seq,t_deliver,dropped,size_bytes\n")
        for r in self.messages:
            buf.write(",".join((
                _fmt_float(r.t_send), str(r.source), str(r.destination),
                str(r.recipient), r.payload,
                "" if r.seq is None else str(r.seq),
                "" if r.dropped else _fmt_float(r.t_deliver),
                "1" if r.dropped else "0", str(r.size))))
            buf.write("\n")
        return buf.getvalue().encode()


def _fmt_float(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    if x == math.inf:
        return "inf"
    return repr(float(x))


@dataclass
class CommStats:
    sent: int
    delivered: int
    dropped: int
    mean_latency: Optional[float]
    max_msg_age_used: Optional[float]


@dataclass
class SafetyReport:
    """Derived safety metrics of the vehicle under test, plus the verdict."""

    scenario_name: str
    role: Role
    vut_id: int
    collision: bool
    min_gap: float
    min_thw: Optional[float]
    min_ttc: float
    max_decel_used: float
    string_stability_ratios: list[float]
    comm: CommStats
    thresholds: Thresholds
    vut_max_decel: float
    verdict: str                      # "pass" | "fail"
    events: list[tuple[float, str]] = field(default_factory=list)

    def to_json(self) -> str:
        def enc(x):
            if isinstance(x, float):
                if math.isnan(x):
                    return None
                if math.isinf(x):
                    return "inf"
            return x
        d = {
            "scenario": self.scenario_name,
            "role": self.role.name.lower(),
            "vehicle_under_test": self.vut_id,
            "collision": self.collision,
            "min_gap": enc(self.min_gap),
            "min_thw": enc(self.min_thw),
            "min_ttc": enc(self.min_ttc),
            "max_decel_used": enc(self.max_decel_used),
            "string_stability_ratios": [enc(r) for r in self.string_stability_ratios],
            "comm_stats": {
                "sent": self.comm.sent,
                "delivered": self.comm.delivered,
                "dropped": self.comm.dropped,
                "mean_latency": enc(self.comm.mean_latency),
                "max_msg_age_used": enc(self.comm.max_msg_age_used),
            },
            "thresholds": {"min_ttc": self.thresholds.min_ttc,
                           "min_thw": self.thresholds.min_thw},
            "vut_max_decel": self.vut_max_decel,
            "events": [{"t": t, "kind": kind} for t, kind in self.events],
            "verdict": self.verdict,
        }
        return json.dumps(d, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

def _payload_name(msg: Message) -> str:
    p = msg.payload
    if isinstance(p, ControlMessage):
        return "control"
    if isinstance(p, ManagementMessage):
        return p.kind.name.lower()
    if isinstance(p, JoinRequest):
        return "join_request"
    if isinstance(p, JoinResponse):
        return "join_response"
    return "i2v_advisory"


def _payload_seq(msg: Message) -> Optional[int]:
    p = msg.payload
    return p.seq if isinstance(p, (ControlMessage, ManagementMessage)) else None


def _planned_vehicle_ids(s: Scenario) -> tuple[list[int], list[int]]:
    """All vehicle ids that can exist during a run, in trace column order."""
    trucks = list(range(1, s.platoon.n_trucks + 1))
    if s.candidate is not None:
        trucks.append(s.platoon.n_trucks + 1)
    n_cutins = sum(1 for ev in s.events if ev.kind == EventKind.CUT_IN)
    scripted = [SCRIPTED_ID_BASE + i
                for i in range(len(s.other_vehicles) + n_cutins)]
    return trucks + scripted, trucks


def _true_gap(views: Sequence[VehicleView], me: VehicleView) -> tuple[float, float]:
    """Ground-truth gap and speed of the nearest vehicle ahead in my lane."""
    best_gap, best_v = math.nan, math.nan
    for vv in views:
        if vv.vid == me.vid or vv.lane != me.lane:
            continue
        if vv.x_front <= me.x_front:
            continue
        gap = (vv.x_front - vv.length) - me.x_front
        if math.isnan(best_gap) or gap < best_gap:
            best_gap, best_v = gap, vv.v
    return best_gap, best_v


def run_closed_loop(s: Scenario, role: Role, settings: RunSettings = RunSettings(),
                    ) -> tuple[Trace, SafetyReport]:
    """Full simulation of the scenario with the given role under test.

    Every truck's control logic drives its actuators and the channel; the
    trace records each tick at fixed dt and the complete message log, and
    the report is evaluated for the vehicle under test.
    """
    world = instantiate_for_role(s, role, seed=settings.seed, gains=settings.gains,
                                 fallback=settings.fallback,
                                 channel_override=settings.channel_override)
    dt = settings.dt
    duration = settings.duration_override if settings.duration_override is not None \
        else s.duration
    n_ticks = int(round(duration / dt))
    vehicle_ids, truck_ids = _planned_vehicle_ids(s)
    n_cols = len(vehicle_ids)
    col = {vid: j for j, vid in enumerate(vehicle_ids)}

    shape = (n_ticks, n_cols)
    trace = Trace(
        scenario_name=s.name, role=role, vut_id=world.vut_id,
        vut_max_decel=world.truck_by_id(world.vut_id).params.max_decel,
        dt=dt, n_ticks=n_ticks, vehicle_ids=vehicle_ids, truck_ids=truck_ids,
        platoon_ids=list(range(1, s.platoon.n_trucks + 1)),
        x=np.full(shape, np.nan), v=np.full(shape, np.nan), a=np.full(shape, np.nan),
        a_cmd=np.full(shape, np.nan), gap=np.full(shape, np.nan),
        thw=np.full(shape, np.nan), ttc=np.full(shape, np.nan),
        op_age=np.full(shape, np.nan),
        role_code=np.full(shape, -1, dtype=np.int8),
        mode_code=np.full(shape, -1, dtype=np.int8),
        present=np.zeros(shape, dtype=bool),
    )
    log = InputLog(scenario_name=s.name, role=role, vut_id=world.vut_id,
                   settings=settings, n_ticks=n_ticks, ticks=[],
                   expected_a_cmd=[], expected_out=[])
    trace.vut_log = log

    for k in range(n_ticks):
        t = k * dt
        trace.events.extend(fire_events(s, world, t))
        inbox = world.deliveries(t)
        views = world.vehicle_views()
        view_by_id = {vv.vid: vv for vv in views}
        visibility = world.conditions.visibility_factor
        units = world.all_trucks()
        meas = {u.vid: sensor_measure(views, u.state, u.params, visibility, u.rng)
                for u in units}
        safe = world.situation_safe()

        cmds: dict[int, AccelCommand] = {}
        outbox: list[Message] = []
        for u in units:
            inputs = DclInputs(meas[u.vid], tuple(inbox.get(u.vid, ())), dt)
            if u.vid == world.vut_id:
                log.ticks.append(TickInputs(
                    meas=inputs.meas, messages=inputs.messages,
                    x=u.state.x_front, v=u.state.v, a=u.state.a, safe=safe,
                    pending_join=u.dcl.pending_join,
                    platoon_thw_cmd=u.dcl.platoon_thw_cmd))
            cmd, out = dcl_step(u.state, u.params, u.dcl, inputs, t,
                                world.gains, world.fallback, safe)
            cmds[u.vid] = cmd
            outbox.extend(out)
            if u.vid == world.vut_id:
                log.expected_a_cmd.append(cmd.a_cmd)
                log.expected_out.append(tuple(encode_message(m) for m in out))

        # record the world state at time t plus the commands computed at t
        for u in units:
            j = col[u.vid]
            vv = view_by_id[u.vid]
            g, v_prec = _true_gap(views, vv)
            trace.present[k, j] = True
            trace.x[k, j] = u.state.x_front
            trace.v[k, j] = u.state.v
            trace.a[k, j] = u.state.a
            trace.a_cmd[k, j] = cmds[u.vid].a_cmd
            trace.role_code[k, j] = int(u.state.role)
            trace.mode_code[k, j] = int(u.state.controller_mode)
            # message age only meaningful once something was received
            trace.op_age[k, j] = u.state.last_op_msg_age \
                if u.dcl.last_op_msg is not None else math.nan
            if not math.isnan(g):
                trace.gap[k, j] = g
                trace.thw[k, j] = g / u.state.v if (g >= 0 and u.state.v > 0) else math.nan
                closing = u.state.v - v_prec
                trace.ttc[k, j] = g / closing if (g >= 0 and closing > 0) else math.inf
        for sv in world.others:
            j = col[sv.vid]
            vv = view_by_id[sv.vid]
            g, v_prec = _true_gap(views, vv)
            trace.present[k, j] = True
            trace.x[k, j] = sv.x_front
            trace.v[k, j] = sv.v
            trace.a[k, j] = sv.a
            trace.a_cmd[k, j] = sv.a
            if not math.isnan(g):
                trace.gap[k, j] = g
                trace.thw[k, j] = g / sv.v if (g >= 0 and sv.v > 0) else math.nan
                closing = sv.v - v_prec
                trace.ttc[k, j] = g / closing if (g >= 0 and closing > 0) else math.inf

        world.send_outgoing(outbox, t)
        for u in units:
            u.state = step_dynamics(u.state, u.params, cmds[u.vid], dt)
        for sv in world.others:
            sv.step(dt)

    for entry in world.channel.log:
        trace.messages.append(MessageRecord(
            t_send=entry.t_send, source=entry.msg.source,
            destination=entry.msg.destination, recipient=entry.recipient,
            payload=_payload_name(entry.msg), seq=_payload_seq(entry.msg),
            t_deliver=entry.t_deliver, dropped=entry.dropped,
            size=len(encode_message(entry.msg))))

    report = evaluate_metrics(trace, world.vut_id, settings.thresholds)
    return trace, report


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _window_max_abs(values: np.ndarray, present: np.ndarray, k0: int, k1: int) -> float:
    seg = values[k0:k1]
    ok = present[k0:k1] & ~np.isnan(seg)
    if not ok.any():
        return 0.0
    return float(np.max(np.abs(seg[ok])))


def string_stability_ratios(trace: Trace, window_s: float = 30.0) -> list[float]:
    """Per-pair max-|a| amplification along the initial platoon order.

    The window spans from the first event firing (start of the run if there
    is none) over ``window_s`` seconds. Quiet pairs (no acceleration signal
    above 1e-9) report 1.0 by convention.
    """
    if trace.events:
        k0 = int(round(trace.events[0].t / trace.dt))
    else:
        k0 = 0
    k1 = min(trace.n_ticks, k0 + int(round(window_s / trace.dt)) + 1)
    cols = [trace.column(vid) for vid in trace.platoon_ids]
    peaks = [_window_max_abs(trace.a[:, j], trace.present[:, j], k0, k1) for j in cols]
    ratios = []
    for i in range(len(peaks) - 1):
        if peaks[i] <= 1e-9 and peaks[i + 1] <= 1e-9:
            ratios.append(1.0)
        elif peaks[i] <= 1e-9:
            ratios.append(math.inf)
        else:
            ratios.append(peaks[i + 1] / peaks[i])
    return ratios


def evaluate_metrics(trace: Trace, vehicle_under_test: int,
                     thresholds: Thresholds = Thresholds()) -> SafetyReport:
    """Compute the safety report of one truck from a recorded trace.

    All fields are pure functions of the trace; the verdict is pass iff
    there is no collision, the headway and time-to-collision minima stay
    above their thresholds, and the truck never brakes beyond its own
    capability.
    """
    j = trace.column(vehicle_under_test)
    present = trace.present[:, j]
    gaps = trace.gap[present, j]
    gaps = gaps[~np.isnan(gaps)]
    min_gap = float(np.min(gaps)) if gaps.size else math.inf
    collision = min_gap <= 0.0

    thws = trace.thw[present, j]
    thws = thws[~np.isnan(thws)]
    min_thw = float(np.min(thws)) if thws.size else None

    ttcs = trace.ttc[present, j]
    ttcs = ttcs[~np.isnan(ttcs)]
    min_ttc = float(np.min(ttcs)) if ttcs.size else math.inf

    accels = trace.a[present, j]
    accels = accels[~np.isnan(accels)]
    max_decel_used = float(max(0.0, -np.min(accels))) if accels.size else 0.0

    ratios = string_stability_ratios(trace)

    sent = delivered = dropped = 0
    latencies = []
    for r in trace.messages:
        involved = r.source == vehicle_under_test or r.recipient == vehicle_under_test
        if not involved:
            continue
        if r.source == vehicle_under_test:
            sent += 1
        if r.dropped:
            dropped += 1
        elif r.recipient == vehicle_under_test:
            delivered += 1
            latencies.append(r.t_deliver - r.t_send)
    in_cacc = present & (trace.mode_code[:, j] == int(ControllerMode.CACC))
    ages = trace.op_age[in_cacc, j]
    ages = ages[~np.isnan(ages)]
    comm = CommStats(
        sent=sent, delivered=delivered, dropped=dropped,
        mean_latency=float(np.mean(latencies)) if latencies else None,
        max_msg_age_used=float(np.max(ages)) if ages.size else None)

    ok = (not collision
          and (min_thw is None or min_thw >= thresholds.min_thw)
          and min_ttc >= thresholds.min_ttc
          and max_decel_used <= trace.vut_max_decel + 1e-9)
    return SafetyReport(
        scenario_name=trace.scenario_name, role=trace.role,
        vut_id=vehicle_under_test, collision=collision, min_gap=min_gap,
        min_thw=min_thw, min_ttc=min_ttc, max_decel_used=max_decel_used,
        string_stability_ratios=ratios, comm=comm, thresholds=thresholds,
        vut_max_decel=trace.vut_max_decel,
        verdict="pass" if ok else "fail",
        events=[(ev.t, ev.kind.value) for ev in trace.events])


# ---------------------------------------------------------------------------
# Open loop
# ---------------------------------------------------------------------------

@dataclass
class OpenLoopResult:
    setpoints: list[float]
    outgoing: list[tuple[bytes, ...]]
    consistency_verdict: str          # "pass" | "fail"
    first_divergence: Optional[int]


def extract_input_log(trace: Trace) -> InputLog:
    """The replayable input log recorded during a closed-loop run."""
    if trace.vut_log is None:
        raise InputLogGap("trace carries no input log")
    return trace.vut_log


def run_open_loop(s: Scenario, role: Role, recorded_inputs: InputLog) -> OpenLoopResult:
    """Replay recorded inputs through the control logic without actuation.

    The vehicle under test's kinematic state is taken from the log tick by
    tick (set points are computed and recorded but never integrated) and
    every set point and outgoing message is compared bit-for-bit against the
    closed-loop originals. Raises InputLogGap when the log does not cover
    the full horizon.
    """
    log = recorded_inputs
    settings = log.settings
    world = instantiate_for_role(s, role, seed=settings.seed, gains=settings.gains,
                                 fallback=settings.fallback,
                                 channel_override=settings.channel_override)
    u = world.truck_by_id(world.vut_id)
    if log.n_ticks == 0 or not log.ticks:
        raise InputLogGap("input log is empty (tick 0 missing)")
    if len(log.ticks) < log.n_ticks:
        raise InputLogGap(f"input log ends at tick {len(log.ticks)}, "
                          f"expected {log.n_ticks}")
    setpoints: list[float] = []
    outgoing: list[tuple[bytes, ...]] = []
    first_div: Optional[int] = None
    for k in range(log.n_ticks):
        tick = log.ticks[k]
        if tick is None:
            raise InputLogGap(f"missing input record at tick {k}")
        t = k * settings.dt
        u.state.x_front, u.state.v, u.state.a = tick.x, tick.v, tick.a
        u.dcl.pending_join = tick.pending_join
        u.dcl.platoon_thw_cmd = tick.platoon_thw_cmd
        cmd, out = dcl_step(u.state, u.params, u.dcl,
                            DclInputs(tick.meas, tick.messages, settings.dt), t,
                            settings.gains, settings.fallback, tick.safe)
        encoded = tuple(encode_message(m) for m in out)
        setpoints.append(cmd.a_cmd)
        outgoing.append(encoded)
        if first_div is None and (cmd.a_cmd != log.expected_a_cmd[k]
                                  or encoded != log.expected_out[k]):
            first_div = k
    return OpenLoopResult(
        setpoints=setpoints, outgoing=outgoing,
        consistency_verdict="pass" if first_div is None else "fail",
        first_divergence=first_div)


# ---------------------------------------------------------------------------
# Communication and sensor sweeps
# ---------------------------------------------------------------------------

def derive_row_seed(master_seed: int, row_index: int) -> int:
    """Stable per-row seed for reproducible sweeps."""
    return int(np.random.SeedSequence((master_seed, row_index)).generate_state(1)[0])


@dataclass
class CommTestRow:
    config: ChannelConfig
    seed: int
    comm: CommStats
    report: SafetyReport
    fallback_entered_at: Optional[float]


def run_comm_test(s: Scenario, role: Role, sweep: Sequence[ChannelConfig],
                  settings: RunSettings = RunSettings()) -> list[CommTestRow]:
    """One closed-loop run per channel configuration, independent seeds."""
    if not sweep:
        raise ValueError("comm test needs a non-empty sweep")
    rows = []
    for i, cfg in enumerate(sweep):
        row_seed = derive_row_seed(settings.seed, i)
        row_settings = replace(settings, seed=row_seed, channel_override=cfg)
        trace, report = run_closed_loop(s, role, row_settings)
        j = trace.column(trace.vut_id)
        fb = None
        ks = np.nonzero(trace.present[:, j]
                        & (trace.mode_code[:, j] == int(ControllerMode.ACC_FALLBACK)))[0]
        if ks.size and role != Role.CANDIDATE:
            fb = float(ks[0] * trace.dt)
        rows.append(CommTestRow(config=cfg, seed=row_seed, comm=report.comm,
                                report=report, fallback_entered_at=fb))
    return rows


@dataclass
class SensorTestRow:
    conditions: object
    rms_range_error: float
    n_samples: int
    cut_in_detection_latency: Optional[float]
    report: SafetyReport


def run_sensor_test(s: Scenario, role: Role, condition_sweep,
                    settings: RunSettings = RunSettings()) -> list[SensorTestRow]:
    """Compare the sensor output of the vehicle under test to ground truth.

    One closed-loop run per environment condition; reports the RMS range
    error over all valid samples and, when the scenario contains a cut-in
    event, the latency until the cut-in flag is raised.
    """
    if not condition_sweep:
        raise ValueError("sensor test needs a non-empty condition sweep")
    rows = []
    for cond in condition_sweep:
        s_cond = replace(s, environment=cond)
        trace, report = run_closed_loop(s_cond, role, settings)
        log = trace.vut_log
        j = trace.column(trace.vut_id)
        errors = []
        detect_tick = None
        for k, tick in enumerate(log.ticks):
            if tick is None:
                continue
            if tick.meas.valid and not math.isnan(trace.gap[k, j]) \
                    and trace.gap[k, j] >= 0:
                errors.append(tick.meas.range - trace.gap[k, j])
            if detect_tick is None and tick.meas.cut_in_detected:
                detect_tick = k
        rms = float(np.sqrt(np.mean(np.square(errors)))) if errors else 0.0
        cut_in_events = [ev for ev in trace.events if ev.kind == EventKind.CUT_IN]
        latency = None
        if cut_in_events:
            latency = math.inf if detect_tick is None \
                else (detect_tick * trace.dt) - cut_in_events[0].t
        rows.append(SensorTestRow(conditions=cond, rms_range_error=rms,
                                  n_samples=len(errors),
                                  cut_in_detection_latency=latency, report=report))
    return rows


# ---------------------------------------------------------------------------
# String-stability probe (synthetic chain, scripted leader step)
# ---------------------------------------------------------------------------

@dataclass
class StringStabilityResult:
    peak_abs_accel: list[float]      # per truck, front to rear
    ratios: list[float]              # per consecutive pair


def string_stability_probe(n_trucks: int = 5, thw: float = 0.8,
                           step_decel: float = -3.0, v0: float = 22.222,
                           gains: ControllerGains = DEFAULT_GAINS,
                           feedforward: bool = True, dt: float = 0.01,
                           params: Optional[TruckParams] = None,
                           step_at: float = 1.0, step_duration: float = 6.0,
                           duration: float = 40.0,
                           op_rate: float = 100.0) -> StringStabilityResult:
    """Leader deceleration step through an ideal channel.

    Builds a homogeneous chain at the given headway, scripts the leader's
    command to a deceleration step, and measures each truck's peak |a| after
    the step. With V2V feedforward the disturbance must not amplify rearward;
    with ``feedforward=False`` the same chain runs as sensor-only ACC. The
    step is sustained (braking towards near standstill) so the rearward
    amplification of sensor-only control expresses itself in the peak
    deceleration, not only in the frequency domain.
    """
    if params is None:
        params = TruckParams(sensor_noise_sigma_range=0.0, sensor_noise_sigma_speed=0.0)
    if not feedforward:
        gains = replace(gains, ff=0.0)
    members = tuple(range(1, n_trucks + 1))
    config = PlatoonConfig(platoon_id=1, members=members, max_size=max(7, n_trucks),
                           least_performing_decel=params.max_decel,
                           comm_update_rate_operational=op_rate,
                           comm_update_rate_tactical=2.0)
    units: list[tuple[TruckState, DclState]] = []
    x = 0.0
    for i, vid in enumerate(members):
        if i > 0:
            x -= params.length + params.standstill_gap + thw * v0
        state = TruckState(truck_id=vid, x_front=x, v=v0, a=0.0,
                           role=config.role_of(vid), thw_setpoint=thw,
                           controller_mode=ControllerMode.CACC)
        dcl = DclState(protocol_version=1, config=config, gap_setpoint_cmd=thw,
                       platoon_thw_cmd=thw)
        units.append((state, dcl))

    channel = Channel(ChannelConfig(latency_mean=0.0, latency_jitter=0.0,
                                    loss_prob=0.0), run_seed=0)
    channel.member_order = list(members)
    rng = np.random.Generator(np.random.PCG64(0))  # unused: noise-free sensors

    n_ticks = int(round(duration / dt))
    peaks = [0.0] * n_trucks
    states = [u[0] for u in units]
    for k in range(n_ticks):
        t = k * dt
        inbox: dict[int, list[Message]] = {}
        for entry in channel.deliver_due(t):
            inbox.setdefault(entry.recipient, []).append(entry.msg)
        views = [VehicleView(st.truck_id, st.x_front, st.v, params.length, 0, True)
                 for st in states]
        outbox: list[Message] = []
        cmds: list[float] = []
        for i, (state, dcl) in enumerate(units):
            if i == 0:
                cmd_val = step_decel if step_at <= t < step_at + step_duration else 0.0
                cmds.append(cmd_val)
                if t + 1e-12 >= dcl.next_op_tx:
                    outbox.append(Message(state.truck_id, members[1], ControlMessage(
                        sender=state.truck_id, seq=dcl.seq, t_tx=t, speed=state.v,
                        acceleration=state.a, commanded_decel=min(cmd_val, 0.0),
                        gap_setpoint_thw=thw)))
                    dcl.seq += 1
                    dcl.next_op_tx += 1.0 / op_rate
            else:
                meas = sensor_measure(views, state, params, 0.0, rng)
                cmd, out = dcl_step(state, params, dcl,
                                    DclInputs(meas, tuple(inbox.get(state.truck_id, ())), dt),
                                    t, gains, DEFAULT_FALLBACK, True)
                cmds.append(cmd.a_cmd)
                outbox.extend(out)
        for msg in outbox:
            channel.send(msg, t)
        for i, (state, dcl) in enumerate(units):
            new_state = step_dynamics(state, params, AccelCommand(cmds[i]), dt)
            units[i] = (new_state, dcl)
            states[i] = new_state
            if t >= step_at:
                peaks[i] = max(peaks[i], abs(new_state.a))
    ratios = []
    for i in range(n_trucks - 1):
        if peaks[i] <= 1e-9 and peaks[i + 1] <= 1e-9:
            ratios.append(1.0)
        elif peaks[i] <= 1e-9:
            ratios.append(math.inf)
        else:
            ratios.append(peaks[i + 1] / peaks[i])
    return StringStabilityResult(peak_abs_accel=peaks, ratios=ratios)
