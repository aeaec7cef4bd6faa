"""Truck dynamics, forward sensor, and role-specific decision-and-control logic.

The longitudinal plant is a point mass behind a first-order actuator lag,
integrated with semi-implicit Euler. Followers run a constant-time-headway
CACC law (gap PD plus a V2V acceleration feedforward from the predecessor);
the leader is a human/ACC driver model that matches the braking of the
vehicle ahead without ever exceeding the platoon's least-performing
deceleration capability.

All step functions are deterministic; sensor noise comes from an explicitly
passed random stream so that runs replay bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from .protocol import (
    MAX_ABS_ACCEL,
    MIN_THW,
    ControlMessage,
    I2VAdvisory,
    IntentReason,
    JoinRequest,
    JoinResponse,
    ManagementKind,
    ManagementMessage,
    Message,
    PlatoonConfig,
    Role,
    TrafficCondition,
    TrailingView,
    apply_platoon_update,
    handle_join_request,
)


class NegativeGap(ValueError):
    """Gap below zero: the vehicles overlap; treat as collision, not a metric."""


class NoInput(RuntimeError):
    """Neither a valid measurement nor a V2V message is available."""


class ControllerMode(IntEnum):
    CACC = 0
    ACC_FALLBACK = 1
    MANUAL_LEAD = 2


@dataclass(frozen=True)
class TruckParams:
    """Physical and sensing parameters of one truck.

    ``max_decel`` is a magnitude (braking capability combined with payload);
    noise sigmas may be zero for an ideal sensor.
    """

    length: float = 16.5
    max_decel: float = 6.0
    max_accel: float = 1.5
    actuator_time_constant: float = 0.3
    standstill_gap: float = 3.0
    sensor_range: float = 250.0
    sensor_noise_sigma_range: float = 0.1
    sensor_noise_sigma_speed: float = 0.1

    def __post_init__(self):
        for name in ("length", "max_decel", "max_accel", "actuator_time_constant",
                     "standstill_gap", "sensor_range"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.max_decel > 10.0:
            raise ValueError(f"max_decel must be <= 10 m/s^2, got {self.max_decel}")
        if self.sensor_noise_sigma_range < 0 or self.sensor_noise_sigma_speed < 0:
            raise ValueError("noise sigmas must be >= 0")


@dataclass(frozen=True)
class ControllerGains:
    kp: float = 0.2   # 1/s^2, gap error gain
    kd: float = 0.7   # 1/s, range-rate gain
    ff: float = 1.0   # dimensionless feedforward weight


@dataclass(frozen=True)
class FallbackParams:
    timeout: float = 0.5        # s without an operational message before degrading
    thw_increment: float = 0.7  # s added to the headway setpoint in fallback


DEFAULT_GAINS = ControllerGains()
DEFAULT_FALLBACK = FallbackParams()

# Leader driver model constants.
LEADER_SPEED_GAIN = 0.4          # 1/s, proportional cruise speed tracking
LEADER_ACCEL_FILTER_TC = 0.5     # s, low-pass on the estimated preceding accel
BRAKE_INTENT_THRESHOLD = 0.5     # m/s^2, braking beyond this announces an intent
GOVERNOR_SPEED = 25.0            # m/s, truck speed governor (cohesion default)


@dataclass
class TruckState:
    """Kinematic plus controller state of one truck (front-bumper position)."""

    truck_id: int
    x_front: float
    v: float
    a: float
    role: Role
    thw_setpoint: float
    controller_mode: ControllerMode
    last_op_msg_age: float = 0.0

    def __post_init__(self):
        if self.v < 0:
            raise ValueError("speed must be >= 0")
        if self.thw_setpoint < MIN_THW:
            raise ValueError(f"thw_setpoint must be >= {MIN_THW}")


@dataclass(frozen=True)
class Measurement:
    """One forward-sensor sample. ``range_rate`` is negative when closing."""

    valid: bool
    range: float = 0.0
    range_rate: float = 0.0
    preceding_speed: float = 0.0
    cut_in_detected: bool = False


@dataclass(frozen=True)
class AccelCommand:
    a_cmd: float


@dataclass(frozen=True)
class VehicleView:
    """Ground-truth snapshot of one road user as seen by the sensor model."""

    vid: int
    x_front: float
    v: float
    length: float
    lane: int
    platoon_member: bool


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def step_dynamics(state: TruckState, params: TruckParams, cmd: AccelCommand,
                  dt: float) -> TruckState:
    """Advance one tick: first-order actuator lag, then semi-implicit Euler.

    The realized acceleration relaxes toward the command with time constant
    tau and is saturated to the actuator envelope; speed clamps at zero (a
    truck never reverses).
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    tau = params.actuator_time_constant
    a_new = state.a + (dt / tau) * (cmd.a_cmd - state.a)
    a_new = min(max(a_new, -params.max_decel), params.max_accel)
    v_new = max(0.0, state.v + a_new * dt)
    x_new = state.x_front + v_new * dt
    if v_new == 0.0 and a_new < 0.0:
        a_new = 0.0  # standing still, brakes hold
    return replace(state, x_front=x_new, v=v_new, a=a_new)


# ---------------------------------------------------------------------------
# Safety metric primitives
# ---------------------------------------------------------------------------

def compute_thw(gap: float, v_ego: float) -> Optional[float]:
    """Time headway: rear-to-front gap divided by ego speed.

    Returns None when the ego vehicle is standing still (headway undefined).
    """
    if gap < 0:
        raise NegativeGap(f"gap {gap} < 0")
    if v_ego == 0:
        return None
    return gap / v_ego


def compute_ttc(gap: float, v_ego: float, v_prec: float) -> float:
    """Time to collision under constant speeds; inf when not closing."""
    if gap < 0:
        raise NegativeGap(f"gap {gap} < 0")
    closing = v_ego - v_prec
    if closing <= 0:
        return math.inf
    return gap / closing


def predict_first_contact(gap: float, v_ego: float, v_prec: float,
                          a_prec: float, a_ego: float = 0.0) -> float:
    """First-contact time with constant accelerations and no-reverse clamping.

    Piecewise solution: each trajectory is a parabola until the vehicle
    reaches standstill, then constant. Returns inf when the gap never
    closes. Complements compute_ttc, which is the constant-speed projection.
    """
    if gap < 0:
        raise NegativeGap(f"gap {gap} < 0")
    if gap == 0:
        return 0.0

    def pos(v0: float, a: float, t: float) -> float:
        if a < 0 and v0 + a * t < 0:
            t_stop = v0 / -a
            return v0 * t_stop + 0.5 * a * t_stop * t_stop
        return v0 * t + 0.5 * a * t * t

    def gap_at(t: float) -> float:
        return gap + pos(v_prec, a_prec, t) - pos(v_ego, a_ego, t)

    breaks = {0.0}
    for v0, a in ((v_ego, a_ego), (v_prec, a_prec)):
        if a < 0 and v0 > 0:
            breaks.add(v0 / -a)
    horizon = 3600.0
    edges = sorted(breaks) + [horizon]
    for t0, t1 in zip(edges, edges[1:]):
        if gap_at(t0) <= 0:
            return t0
        if gap_at(t1) > 0:
            continue
        lo, hi = t0, t1  # gap is smooth (quadratic) inside the segment
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if gap_at(mid) > 0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)
    return math.inf


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------

def cacc_command(meas: Optional[Measurement], op_msg: Optional[ControlMessage],
                 v_ego: float, thw_setpoint: float, params: TruckParams,
                 gains: ControllerGains = DEFAULT_GAINS) -> AccelCommand:
    """Constant-time-headway CACC law with predecessor feedforward.

    Desired gap is ``standstill_gap + thw_setpoint * v_ego``; the command is
    a PD term on gap error and range rate plus the predecessor's commanded
    deceleration (or realized acceleration when it is not braking) weighted
    by ``gains.ff``. Pass ``op_msg=None`` when the last message is stale; the
    law then degrades to sensor-only ACC. Raises NoInput when neither source
    is available.
    """
    has_meas = meas is not None and meas.valid
    if not has_meas and op_msg is None:
        raise NoInput("no valid measurement and no operational message")
    a = 0.0
    if has_meas:
        d_star = params.standstill_gap + thw_setpoint * v_ego
        a += gains.kp * (meas.range - d_star) + gains.kd * meas.range_rate
    if op_msg is not None:
        a_ff = op_msg.commanded_decel if op_msg.commanded_decel < 0 else op_msg.acceleration
        a += gains.ff * a_ff
    return AccelCommand(min(max(a, -params.max_decel), params.max_accel))


def fallback_policy(state: TruckState, last_op_msg_age: float,
                    timeout: float = DEFAULT_FALLBACK.timeout,
                    thw_increment: float = DEFAULT_FALLBACK.thw_increment,
                    ) -> tuple[ControllerMode, float]:
    """Degrade to sensor-only ACC when operational messages go stale.

    Returns the controller mode and the effective headway setpoint: in
    fallback the setpoint is raised by ``thw_increment`` on top of the
    commanded value (and restored once communication recovers).
    """
    if last_op_msg_age <= timeout:
        return ControllerMode.CACC, state.thw_setpoint
    return ControllerMode.ACC_FALLBACK, state.thw_setpoint + thw_increment


@dataclass
class LeaderModelState:
    """Driver/ACC state of the leading truck."""

    set_speed: float
    prec_accel_estimate: float = 0.0
    prev_prec_speed: Optional[float] = None
    jam_ahead: bool = False


def leader_driver_model(meas: Optional[Measurement], v_ego: float,
                        platoon: PlatoonConfig, i2v: Optional[I2VAdvisory],
                        params: TruckParams, lead: LeaderModelState,
                        thw_setpoint: float, dt: float,
                        gains: ControllerGains = DEFAULT_GAINS,
                        cohesion_max_speed: Optional[float] = None,
                        ) -> tuple[AccelCommand, Optional[tuple[float, float]]]:
    """One tick of the leading truck's ACC-supported driver.

    Tracks the preceding vehicle (when present) with a gap PD law plus a
    low-pass estimate of its deceleration, otherwise cruises at the set
    speed, honoring an I2V speed limit and the cohesion constraints reported
    from behind. Braking never exceeds the platoon's least-performing
    deceleration. Updates ``lead`` in place.

    Returns the command and, while braking beyond the intent threshold or
    with a jam advisory active, ``(intent_decel, target_speed)`` for the
    tactical speed-profile announcement downstream.
    """
    v_target = lead.set_speed
    if cohesion_max_speed is not None:
        v_target = min(v_target, cohesion_max_speed)
    if i2v is not None:
        if i2v.speed_limit is not None:
            v_target = min(v_target, i2v.speed_limit)
        if i2v.traffic_condition == TrafficCondition.JAM_AHEAD:
            lead.jam_ahead = True
        elif i2v.traffic_condition == TrafficCondition.FREE:
            lead.jam_ahead = False
    a_speed = LEADER_SPEED_GAIN * (v_target - v_ego)
    a = a_speed
    if meas is not None and meas.valid:
        raw = 0.0 if lead.prev_prec_speed is None \
            else (meas.preceding_speed - lead.prev_prec_speed) / dt
        lead.prev_prec_speed = meas.preceding_speed
        alpha = dt / LEADER_ACCEL_FILTER_TC
        lead.prec_accel_estimate += alpha * (raw - lead.prec_accel_estimate)
        d_star = params.standstill_gap + thw_setpoint * v_ego
        a_follow = (gains.kp * (meas.range - d_star) + gains.kd * meas.range_rate
                    + min(lead.prec_accel_estimate, 0.0))
        if meas.range_rate < -0.5:
            a_follow = min(a_follow, 0.0)  # never accelerate into a closing gap
        a = min(a_speed, a_follow)
    else:
        lead.prev_prec_speed = None
    # Never brake harder than the weakest member can follow.
    a = max(a, -platoon.least_performing_decel)
    a = min(max(a, -params.max_decel), params.max_accel)
    intent = None
    if a < -BRAKE_INTENT_THRESHOLD or lead.jam_ahead:
        intent = (min(a, 0.0), v_target)
    return AccelCommand(a), intent


# ---------------------------------------------------------------------------
# Sensor
# ---------------------------------------------------------------------------

def sensor_measure(world: Sequence[VehicleView], ego: TruckState,
                   params: TruckParams, visibility_factor: float,
                   rng: np.random.Generator) -> Measurement:
    """Measure the nearest same-lane vehicle ahead within sensor range.

    Additive zero-mean Gaussian noise on range and range rate is scaled by
    the visibility factor (1 = nominal conditions, 0 = perfect). The cut-in
    flag is raised while a non-platoon vehicle sits between the ego truck
    and a platoon member further ahead.
    """
    ego_lane = 0
    for vv in world:
        if vv.vid == ego.truck_id:
            ego_lane = vv.lane
            break
    target = None
    target_gap = math.inf
    for vv in world:
        if vv.vid == ego.truck_id or vv.lane != ego_lane:
            continue
        if vv.x_front <= ego.x_front:
            continue
        gap = (vv.x_front - vv.length) - ego.x_front
        if gap < target_gap:
            target_gap = gap
            target = vv
    if target is None or target_gap > params.sensor_range:
        return Measurement(valid=False)
    cut_in = False
    if not target.platoon_member:
        cut_in = any(vv.platoon_member and vv.x_front > target.x_front for vv in world)
    true_rate = target.v - ego.v
    noisy_gap, noisy_rate = target_gap, true_rate
    if visibility_factor > 0:
        if params.sensor_noise_sigma_range > 0:
            noisy_gap += rng.normal(0.0, params.sensor_noise_sigma_range * visibility_factor)
        if params.sensor_noise_sigma_speed > 0:
            noisy_rate += rng.normal(0.0, params.sensor_noise_sigma_speed * visibility_factor)
    noisy_gap = min(max(noisy_gap, 0.0), params.sensor_range)
    return Measurement(valid=True, range=noisy_gap, range_rate=noisy_rate,
                       preceding_speed=max(0.0, ego.v + noisy_rate),
                       cut_in_detected=cut_in)


# ---------------------------------------------------------------------------
# Decision and control logic (per-role step function)
# ---------------------------------------------------------------------------

@dataclass
class DclState:
    """Per-truck protocol state carried between control ticks."""

    protocol_version: int
    config: Optional[PlatoonConfig] = None
    seq: int = 0
    last_op_msg: Optional[ControlMessage] = None
    last_op_rx_t: float = 0.0
    gap_setpoint_cmd: float = MIN_THW           # headway this truck applies/relays
    platoon_thw_cmd: float = MIN_THW            # headway the leader commands downstream
    cohesion_behind: Optional[tuple[float, float]] = None
    latest_advisory: Optional[I2VAdvisory] = None
    intent_relay: list[ManagementMessage] = field(default_factory=list)
    update_relay: list[PlatoonConfig] = field(default_factory=list)
    pending_join: Optional[tuple[int, JoinRequest]] = None
    pending_responses: list[tuple[int, JoinResponse]] = field(default_factory=list)
    next_op_tx: float = 0.0
    next_tac_tx: float = 0.0
    intent_active: bool = False
    last_intent_tx: float = -math.inf
    leader: Optional[LeaderModelState] = None
    decel_tolerance: float = 1.0
    desired_max_speed: float = GOVERNOR_SPEED   # own cohesion constraint
    max_op_age_used: float = 0.0


@dataclass(frozen=True)
class DclInputs:
    """Everything a truck's control logic consumes in one tick."""

    meas: Measurement
    messages: tuple[Message, ...]
    dt: float


def _next_seq(dcl: DclState) -> int:
    s = dcl.seq
    dcl.seq += 1
    return s


def _ingest(truck: TruckState, dcl: DclState, msgs: Sequence[Message],
            situation_safe: bool, t: float) -> None:
    """Apply this tick's delivered messages to the protocol state."""
    for m in msgs:
        p = m.payload
        cfg = dcl.config
        member = cfg is not None and truck.truck_id in cfg.members
        pred = cfg.predecessor_of(truck.truck_id) if member else None
        succ = cfg.successor_of(truck.truck_id) if member else None
        if isinstance(p, ControlMessage):
            if member and p.sender == pred:
                dcl.last_op_msg = p
                dcl.last_op_rx_t = t
                dcl.gap_setpoint_cmd = max(MIN_THW, p.gap_setpoint_thw)
        elif isinstance(p, ManagementMessage):
            if p.kind == ManagementKind.SPEED_PROFILE_INTENT:
                if member and p.sender == pred and succ is not None:
                    dcl.intent_relay.append(p)
            elif p.kind == ManagementKind.COHESION_REPORT:
                if member and p.sender == succ:
                    dcl.cohesion_behind = (p.cohesion_max_speed, p.cohesion_max_accel)
            elif p.kind == ManagementKind.PLATOON_UPDATE:
                if member:
                    dcl.config = apply_platoon_update(cfg, p.config, truck.truck_id)
                    truck.role = dcl.config.role_of(truck.truck_id)
                    if dcl.config.predecessor_of(truck.truck_id) is not None:
                        dcl.update_relay.append(p.config)
        elif isinstance(p, JoinRequest):
            if truck.role == Role.TRAILING and cfg is not None:
                view = TrailingView(cfg, dcl.protocol_version, situation_safe)
                resp = handle_join_request(view, p, dcl.decel_tolerance)
                dcl.pending_responses.append((p.candidate, resp))
                if resp.accepted:
                    dcl.config = resp.config
                    truck.role = dcl.config.role_of(truck.truck_id)
                    if dcl.config.predecessor_of(truck.truck_id) is not None:
                        dcl.update_relay.append(resp.config)
        elif isinstance(p, JoinResponse):
            if truck.role == Role.CANDIDATE and p.accepted:
                dcl.config = p.config
                truck.role = dcl.config.role_of(truck.truck_id)
                dcl.last_op_rx_t = t  # comms considered fresh on admission
                dcl.gap_setpoint_cmd = truck.thw_setpoint
        elif isinstance(p, I2VAdvisory):
            dcl.latest_advisory = p
            if p.advised_thw is not None:
                dcl.gap_setpoint_cmd = max(dcl.gap_setpoint_cmd, p.advised_thw)
                dcl.platoon_thw_cmd = max(dcl.platoon_thw_cmd, p.advised_thw)


def dcl_step(truck: TruckState, params: TruckParams, dcl: DclState,
             inputs: DclInputs, t: float,
             gains: ControllerGains = DEFAULT_GAINS,
             fallback: FallbackParams = DEFAULT_FALLBACK,
             situation_safe: bool = True,
             ) -> tuple[AccelCommand, list[Message]]:
    """One decision-and-control tick for a truck in its current role.

    Consumes the sensor measurement and the V2V/I2V messages delivered this
    tick, updates controller and protocol state in place (mode, headway
    setpoint, role on configuration changes), and returns the actuator set
    point plus all outgoing messages:

    * Leader: periodic ControlMessage downstream; SpeedProfileIntent while
      braking or with a jam advisory active.
    * Follower: periodic ControlMessage downstream, periodic aggregated
      CohesionReport upstream; relays intents downstream and configuration
      updates upstream.
    * Trailing: periodic CohesionReport upstream; arbitrates join requests
      and emits the JoinResponse plus the rear-to-front PlatoonUpdate.
    * Candidate: sensor-only ACC behind the platoon; emits its JoinRequest
      when scheduled; becomes Trailing on acceptance.
    """
    _ingest(truck, dcl, inputs.messages, situation_safe, t)
    out: list[Message] = []
    cfg = dcl.config
    meas = inputs.meas

    # --- control ------------------------------------------------------------
    intent = None
    if truck.role == Role.LEADER:
        truck.controller_mode = ControllerMode.MANUAL_LEAD
        cohesion_speed = dcl.cohesion_behind[0] if dcl.cohesion_behind else None
        a_cmd, intent = leader_driver_model(
            meas, truck.v, cfg, dcl.latest_advisory, params, dcl.leader,
            truck.thw_setpoint, inputs.dt, gains, cohesion_speed)
    elif truck.role == Role.CANDIDATE:
        truck.controller_mode = ControllerMode.ACC_FALLBACK
        if meas.valid:
            a_cmd = cacc_command(meas, None, truck.v, truck.thw_setpoint, params, gains)
        else:
            a_cmd = AccelCommand(0.0)  # free road ahead, hold speed
    else:  # FOLLOWER or TRAILING
        truck.last_op_msg_age = t - dcl.last_op_rx_t
        truck.thw_setpoint = dcl.gap_setpoint_cmd
        mode, eff_thw = fallback_policy(truck, truck.last_op_msg_age,
                                        fallback.timeout, fallback.thw_increment)
        truck.controller_mode = mode
        op = dcl.last_op_msg if mode == ControllerMode.CACC else None
        if op is not None:
            dcl.max_op_age_used = max(dcl.max_op_age_used, truck.last_op_msg_age)
        if not meas.valid and op is None:
            a_cmd = AccelCommand(0.0)  # no input at all: hold, metrics will tell
        else:
            a_cmd = cacc_command(meas, op, truck.v, eff_thw, params, gains)

    # --- outgoing messages ----------------------------------------------------
    member = cfg is not None and truck.truck_id in cfg.members
    pred = cfg.predecessor_of(truck.truck_id) if member else None
    succ = cfg.successor_of(truck.truck_id) if member else None

    if member and succ is not None and t + 1e-12 >= dcl.next_op_tx:
        thw_cmd = dcl.platoon_thw_cmd if truck.role == Role.LEADER else dcl.gap_setpoint_cmd
        out.append(Message(truck.truck_id, succ, ControlMessage(
            sender=truck.truck_id, seq=_next_seq(dcl), t_tx=t,
            speed=truck.v,
            acceleration=min(max(truck.a, -MAX_ABS_ACCEL), MAX_ABS_ACCEL),
            commanded_decel=min(a_cmd.a_cmd, 0.0),
            gap_setpoint_thw=thw_cmd)))
        dcl.next_op_tx += 1.0 / cfg.comm_update_rate_operational

    if member and pred is not None and t + 1e-12 >= dcl.next_tac_tx:
        max_speed = dcl.desired_max_speed
        max_accel = params.max_accel
        if dcl.cohesion_behind is not None:
            max_speed = min(max_speed, dcl.cohesion_behind[0])
            max_accel = min(max_accel, dcl.cohesion_behind[1])
        out.append(Message(truck.truck_id, pred, ManagementMessage.cohesion_report(
            truck.truck_id, _next_seq(dcl), t, max_speed, max_accel)))
        dcl.next_tac_tx += 1.0 / cfg.comm_update_rate_tactical

    if truck.role == Role.LEADER:
        if intent is not None and succ is not None:
            period = 1.0 / cfg.comm_update_rate_tactical
            if not dcl.intent_active or t - dcl.last_intent_tx + 1e-12 >= period:
                decel, target = intent
                out.append(Message(truck.truck_id, succ, ManagementMessage.speed_profile_intent(
                    truck.truck_id, _next_seq(dcl), t, decel, target,
                    IntentReason.TRAFFIC_JAM_AHEAD)))
                dcl.last_intent_tx = t
            dcl.intent_active = True
        else:
            dcl.intent_active = False

    if member:
        if succ is not None:
            for relayed in dcl.intent_relay:
                out.append(Message(truck.truck_id, succ, ManagementMessage.speed_profile_intent(
                    truck.truck_id, _next_seq(dcl), t, relayed.intent_decel,
                    relayed.intent_target_speed, relayed.intent_reason)))
        dcl.intent_relay.clear()
        if pred is not None:
            for cfg_up in dcl.update_relay:
                out.append(Message(truck.truck_id, pred, ManagementMessage.platoon_update(
                    truck.truck_id, _next_seq(dcl), t, cfg_up)))
        dcl.update_relay.clear()

    for candidate_id, resp in dcl.pending_responses:
        out.append(Message(truck.truck_id, candidate_id, resp))
    dcl.pending_responses.clear()

    if truck.role == Role.CANDIDATE and dcl.pending_join is not None:
        dest, req = dcl.pending_join
        out.append(Message(truck.truck_id, dest, req))
        dcl.pending_join = None

    return a_cmd, out
