"""Scenario data model, the .scn file format, and the simulation world.

A scenario is the classical quantitative description of the vehicle under
test and its environment, extended with a communication layer: the V2V
channel parameters, the I2V advisory inputs, and communication events are
first-class parts of the file. Scenarios are immutable after parsing and
can be shared across concurrent runs; the World built from them holds all
mutable per-run state.

File format: line-oriented sections (``[section]``) of ``key = value``
pairs; ``[truck]``, ``[vehicle]``, ``[segment]`` and ``[event]`` sections
repeat. See the bundled corpus under ``platoonsim/scenarios/``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .channel import Channel, ChannelConfig, environment_modifier
from .protocol import (
    BROADCAST,
    INFRASTRUCTURE,
    MIN_THW,
    I2VAdvisory,
    JoinRequest,
    JoinResponse,
    Message,
    PlatoonConfig,
    Role,
    TrafficCondition,
)
from .vehicle import (
    DEFAULT_FALLBACK,
    DEFAULT_GAINS,
    ControllerGains,
    ControllerMode,
    DclInputs,
    DclState,
    FallbackParams,
    LeaderModelState,
    TruckParams,
    TruckState,
    VehicleView,
    dcl_step,
    sensor_measure,
    step_dynamics,
)


class ScenarioSyntaxError(Exception):
    """Malformed scenario text; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class ScenarioValidationError(Exception):
    """One or more named invariants violated; carries (line, message) pairs."""

    def __init__(self, errors: list[tuple[int, str]]):
        super().__init__("; ".join(f"line {ln}: {msg}" for ln, msg in errors))
        self.errors = errors


class RoleNotRealizable(ValueError):
    """The requested role does not exist in this scenario's platoon."""


class SegmentKind(Enum):
    TUNNEL = "tunnel"
    BRIDGE = "bridge"
    GANTRY = "gantry"


class Lighting(Enum):
    DAY = "day"
    NIGHT = "night"


class EventKind(Enum):
    PRECEDING_VEHICLE_BRAKES = "preceding_vehicle_brakes"
    CUT_IN = "cut_in"
    CANDIDATE_JOIN_REQUEST = "candidate_join_request"
    I2V_BROADCAST = "i2v_broadcast"
    CHANNEL_DEGRADE = "channel_degrade"
    LEADER_THW_ADJUST = "leader_thw_adjust"


@dataclass(frozen=True)
class RoadSegmentEffect:
    """An infrastructure stretch that degrades the channel while inside it."""

    kind: SegmentKind
    from_x: float
    to_x: float
    loss_multiplier: float = 1.0
    latency_multiplier: float = 1.0

    def __post_init__(self):
        if not self.from_x < self.to_x:
            raise ValueError(f"segment needs from_x < to_x, got {self.from_x} >= {self.to_x}")
        if self.loss_multiplier < 0 or self.latency_multiplier < 0:
            raise ValueError("segment multipliers must be >= 0")


@dataclass(frozen=True)
class EnvironmentConditions:
    visibility_factor: float = 1.0
    active_segments: tuple[RoadSegmentEffect, ...] = ()
    lighting: Lighting = Lighting.DAY

    def __post_init__(self):
        object.__setattr__(self, "active_segments", tuple(self.active_segments))
        if self.visibility_factor < 0:
            raise ValueError("visibility_factor must be >= 0")


@dataclass(frozen=True)
class ScenarioEvent:
    """A timed or condition-triggered world mutation.

    Exactly one of ``t`` (trigger time) and ``when_gap_below`` (the leader's
    gap to the traffic ahead crossing a threshold) must be set; the other
    fields belong to the specific kind.
    """

    kind: EventKind
    t: Optional[float] = None
    when_gap_below: Optional[float] = None
    decel: Optional[float] = None                   # preceding_vehicle_brakes
    between_index: Optional[int] = None             # cut_in
    entry_speed: Optional[float] = None
    entry_gap_fraction: Optional[float] = None
    vehicle_length: Optional[float] = None
    speed_limit: Optional[float] = None             # i2v_broadcast
    advised_thw: Optional[float] = None
    traffic_condition: Optional[TrafficCondition] = None
    latency_mean: Optional[float] = None            # channel_degrade overrides
    latency_jitter: Optional[float] = None
    loss_prob: Optional[float] = None
    congestion_extra_latency: Optional[float] = None
    congestion_threshold: Optional[int] = None
    new_thw: Optional[float] = None                 # leader_thw_adjust

    _REQUIRED = {
        EventKind.PRECEDING_VEHICLE_BRAKES: ("decel",),
        EventKind.CUT_IN: ("between_index", "entry_speed", "entry_gap_fraction"),
        EventKind.CANDIDATE_JOIN_REQUEST: (),
        EventKind.I2V_BROADCAST: (),
        EventKind.CHANNEL_DEGRADE: (),
        EventKind.LEADER_THW_ADJUST: ("new_thw",),
    }
    _OPTIONAL = {
        EventKind.CUT_IN: ("vehicle_length",),
        EventKind.I2V_BROADCAST: ("speed_limit", "advised_thw", "traffic_condition"),
        EventKind.CHANNEL_DEGRADE: ("latency_mean", "latency_jitter", "loss_prob",
                                    "congestion_extra_latency", "congestion_threshold"),
    }

    def __post_init__(self):
        if (self.t is None) == (self.when_gap_below is None):
            raise ValueError("exactly one of t / when_gap_below must be set")
        if self.t is not None and self.t < 0:
            raise ValueError("event time must be >= 0")
        if self.when_gap_below is not None and self.when_gap_below <= 0:
            raise ValueError("when_gap_below must be > 0")
        kind = EventKind(self.kind)
        allowed = set(self._REQUIRED[kind]) | set(self._OPTIONAL.get(kind, ()))
        payload_fields = ("decel", "between_index", "entry_speed", "entry_gap_fraction",
                          "vehicle_length", "speed_limit", "advised_thw", "traffic_condition",
                          "latency_mean", "latency_jitter", "loss_prob",
                          "congestion_extra_latency", "congestion_threshold", "new_thw")
        for name in payload_fields:
            value = getattr(self, name)
            if value is not None and name not in allowed:
                raise ValueError(f"field {name} is not meaningful for event {kind.value}")
            if value is None and name in self._REQUIRED[kind]:
                raise ValueError(f"event {kind.value} requires field {name}")
        if kind == EventKind.PRECEDING_VEHICLE_BRAKES and self.decel >= 0:
            raise ValueError("brake decel must be < 0")
        if kind == EventKind.CUT_IN:
            if self.between_index < 0:
                raise ValueError("between_index must be >= 0")
            if not (0.0 < self.entry_gap_fraction < 1.0):
                raise ValueError("entry_gap_fraction must be within (0, 1)")
            if self.entry_speed < 0:
                raise ValueError("entry_speed must be >= 0")
        if kind == EventKind.I2V_BROADCAST:
            if self.speed_limit is None and self.advised_thw is None \
                    and self.traffic_condition is None:
                raise ValueError("i2v_broadcast needs at least one advisory field")
        if kind == EventKind.LEADER_THW_ADJUST and self.new_thw < MIN_THW:
            raise ValueError(f"new_thw must be >= {MIN_THW}")

    def channel_overrides(self) -> dict:
        keys = ("latency_mean", "latency_jitter", "loss_prob",
                "congestion_extra_latency", "congestion_threshold")
        return {k: getattr(self, k) for k in keys if getattr(self, k) is not None}


@dataclass(frozen=True)
class RoadSpec:
    lanes: int = 3
    speed_limit: float = 25.0

    def __post_init__(self):
        if self.lanes < 1:
            raise ValueError("a road has at least one lane")
        if self.speed_limit <= 0:
            raise ValueError("speed_limit must be > 0")


@dataclass(frozen=True)
class OtherVehicle:
    """A scripted (non-reactive) road user, e.g. the preceding passenger car."""

    x_front: float
    v: float
    length: float = 4.5
    lane: int = 0

    def __post_init__(self):
        if self.v < 0 or self.length <= 0:
            raise ValueError("scripted vehicle needs v >= 0 and length > 0")


@dataclass(frozen=True)
class CandidateSpec:
    """A truck driving behind the platoon that may request to join."""

    params: TruckParams = TruckParams()
    gap_behind_thw: float = 2.0
    speed: Optional[float] = None          # default: platoon initial speed
    thw_setpoint: float = 2.0              # its own ACC headway before joining
    protocol_version: int = 1

    def __post_init__(self):
        if self.gap_behind_thw < MIN_THW:
            raise ValueError(f"gap_behind_thw must be >= {MIN_THW}")
        if self.thw_setpoint < MIN_THW:
            raise ValueError(f"thw_setpoint must be >= {MIN_THW}")


@dataclass(frozen=True)
class PlatoonInit:
    n_trucks: int = 3
    initial_speed: float = 22.222
    initial_thw: float = 1.5
    lane: int = 0
    leader_thw: float = 2.0                # leader's own headway to traffic ahead
    platoon_id: int = 1
    max_size: int = 7
    protocol_version: int = 1
    rate_operational: float = 20.0
    rate_tactical: float = 2.0
    truck_params: tuple[TruckParams, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "truck_params", tuple(self.truck_params))
        if self.initial_thw < MIN_THW:
            raise ValueError(
                f"initial_thw must be >= {MIN_THW} s (minimum platooning headway)")
        if self.leader_thw < MIN_THW:
            raise ValueError(f"leader_thw must be >= {MIN_THW}")
        if not (2 <= self.n_trucks <= self.max_size):
            raise ValueError(f"n_trucks must be within [2, max_size={self.max_size}]")
        if self.initial_speed < 0:
            raise ValueError("initial_speed must be >= 0")
        if len(self.truck_params) not in (0, 1, self.n_trucks):
            raise ValueError("give 0, 1 or n_trucks [truck] blocks")

    def params_for(self, index: int) -> TruckParams:
        if not self.truck_params:
            return TruckParams()
        if len(self.truck_params) == 1:
            return self.truck_params[0]
        return self.truck_params[index]

    def least_performing_decel(self) -> float:
        return min(self.params_for(i).max_decel for i in range(self.n_trucks))


@dataclass(frozen=True)
class Scenario:
    name: str
    duration: float
    ego_role_under_test: Role
    road: RoadSpec
    platoon: PlatoonInit
    other_vehicles: tuple[OtherVehicle, ...] = ()
    candidate: Optional[CandidateSpec] = None
    events: tuple[ScenarioEvent, ...] = ()
    environment: EnvironmentConditions = EnvironmentConditions()
    channel: ChannelConfig = ChannelConfig()
    i2v_present: bool = False

    def __post_init__(self):
        object.__setattr__(self, "other_vehicles", tuple(self.other_vehicles))
        object.__setattr__(self, "events", tuple(self.events))
        if self.duration <= 0:
            raise ValueError("duration must be > 0")


def realizable_roles(s: Scenario) -> list[Role]:
    roles = [Role.LEADER]
    if s.platoon.n_trucks >= 3:
        roles.append(Role.FOLLOWER)
    roles.append(Role.TRAILING)
    if s.candidate is not None:
        roles.append(Role.CANDIDATE)
    return roles


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_ROLE_NAMES = {r.name.lower(): r for r in Role}

_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False}


def _parse_value(raw: str):
    word = raw.strip()
    low = word.lower()
    if low in _BOOL_WORDS:
        return _BOOL_WORDS[low]
    try:
        return int(word)
    except ValueError:
        pass
    try:
        return float(word)
    except ValueError:
        pass
    return word


@dataclass
class _Section:
    name: str
    line: int
    pairs: dict = field(default_factory=dict)   # key -> (value, line)

    def pop(self, key, default=None):
        if key in self.pairs:
            return self.pairs.pop(key)[0]
        return default

    def pop_required(self, key, errors):
        if key in self.pairs:
            return self.pairs.pop(key)[0]
        errors.append((self.line, f"[{self.name}] is missing required key '{key}'"))
        return None


def _tokenize(text: str) -> list[_Section]:
    sections: list[_Section] = []
    current: Optional[_Section] = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ScenarioSyntaxError(ln, f"expected '[section]', got {raw.strip()!r}")
            name = line[1:-1].strip().lower()
            current = _Section(name, ln)
            sections.append(current)
            continue
        if "=" not in line:
            raise ScenarioSyntaxError(ln, f"expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ScenarioSyntaxError(ln, "key/value pair before any [section] header")
        key, value = line.split("=", 1)
        key = key.strip().lower()
        if not key:
            raise ScenarioSyntaxError(ln, "empty key")
        if key in current.pairs:
            raise ScenarioSyntaxError(ln, f"duplicate key '{key}' in [{current.name}]")
        current.pairs[key] = (_parse_value(value), ln)
    return sections


_TRUCK_PARAM_KEYS = tuple(f.name for f in fields(TruckParams))
_CHANNEL_KEYS = tuple(f.name for f in fields(ChannelConfig))


def _build_dataclass(cls, section: _Section, errors, extra=None, skip=()):
    """Build a frozen dataclass from a section, mapping constructor failures
    to validation errors anchored at the section line."""
    kwargs = dict(extra or {})
    for f in fields(cls):
        if f.name in skip or f.name in kwargs:
            continue
        if f.name in section.pairs:
            kwargs[f.name] = section.pairs.pop(f.name)[0]
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append((section.line, f"[{section.name}] invalid: {exc}"))
        return None


def _leftover_keys(section: _Section, errors):
    for key, (_, ln) in section.pairs.items():
        errors.append((ln, f"unknown key '{key}' in [{section.name}]"))


def parse_scenario(text: str) -> Scenario:
    """Parse and validate scenario text.

    Raises ScenarioSyntaxError on the first malformed line and
    ScenarioValidationError carrying every violated invariant with its line
    position.
    """
    sections = _tokenize(text)
    errors: list[tuple[int, str]] = []
    by_name = defaultdict(list)
    for sec in sections:
        by_name[sec.name].append(sec)

    known = {"scenario", "road", "platoon", "truck", "vehicle", "candidate",
             "environment", "segment", "channel", "event"}
    for sec in sections:
        if sec.name not in known:
            errors.append((sec.line, f"unknown section [{sec.name}]"))
    for name in ("scenario", "road", "platoon", "candidate", "environment", "channel"):
        if len(by_name.get(name, [])) > 1:
            errors.append((by_name[name][1].line, f"[{name}] may appear only once"))

    # --- [scenario] ---------------------------------------------------------
    if "scenario" not in by_name:
        errors.append((1, "missing [scenario] section"))
        raise ScenarioValidationError(errors)
    sc = by_name["scenario"][0]
    name = sc.pop_required("name", errors)
    duration = sc.pop_required("duration", errors)
    role_raw = sc.pop("role_under_test", "leader")
    i2v_present = sc.pop("i2v_present", False)
    role = _ROLE_NAMES.get(str(role_raw).lower())
    if role is None:
        errors.append((sc.line, f"unknown role_under_test {role_raw!r}"))
    _leftover_keys(sc, errors)

    # --- [road] -------------------------------------------------------------
    road = RoadSpec()
    if "road" in by_name:
        road = _build_dataclass(RoadSpec, by_name["road"][0], errors) or RoadSpec()
        _leftover_keys(by_name["road"][0], errors)

    # --- [truck] blocks and [platoon] ----------------------------------------
    truck_params = []
    for sec in by_name.get("truck", []):
        tp = _build_dataclass(TruckParams, sec, errors)
        _leftover_keys(sec, errors)
        if tp is not None:
            truck_params.append(tp)

    platoon = None
    if "platoon" in by_name:
        platoon = _build_dataclass(PlatoonInit, by_name["platoon"][0], errors,
                                   extra={"truck_params": tuple(truck_params)})
        _leftover_keys(by_name["platoon"][0], errors)
    else:
        errors.append((sc.line, "missing [platoon] section"))

    # --- [vehicle] blocks -----------------------------------------------------
    others = []
    for sec in by_name.get("vehicle", []):
        ov = _build_dataclass(OtherVehicle, sec, errors)
        _leftover_keys(sec, errors)
        if ov is not None:
            others.append(ov)

    # --- [candidate] -----------------------------------------------------------
    candidate = None
    if "candidate" in by_name:
        sec = by_name["candidate"][0]
        tp_kwargs = {}
        for key in _TRUCK_PARAM_KEYS:
            if key in sec.pairs:
                tp_kwargs[key] = sec.pairs.pop(key)[0]
        try:
            cand_params = TruckParams(**tp_kwargs)
        except (TypeError, ValueError) as exc:
            errors.append((sec.line, f"[candidate] invalid: {exc}"))
            cand_params = TruckParams()
        candidate = _build_dataclass(CandidateSpec, sec, errors,
                                     extra={"params": cand_params})
        _leftover_keys(sec, errors)

    # --- [environment] + [segment] ----------------------------------------------
    segments = []
    for sec in by_name.get("segment", []):
        kind_raw = sec.pop("kind", None)
        try:
            kind = SegmentKind(str(kind_raw).lower())
        except ValueError:
            errors.append((sec.line, f"unknown segment kind {kind_raw!r}"))
            kind = SegmentKind.TUNNEL
        seg = _build_dataclass(RoadSegmentEffect, sec, errors, extra={"kind": kind})
        _leftover_keys(sec, errors)
        if seg is not None:
            segments.append(seg)

    environment = EnvironmentConditions(active_segments=tuple(segments))
    if "environment" in by_name:
        sec = by_name["environment"][0]
        lighting_raw = sec.pop("lighting", "day")
        try:
            lighting = Lighting(str(lighting_raw).lower())
        except ValueError:
            errors.append((sec.line, f"unknown lighting {lighting_raw!r}"))
            lighting = Lighting.DAY
        environment = _build_dataclass(
            EnvironmentConditions, sec, errors,
            extra={"active_segments": tuple(segments), "lighting": lighting},
        ) or environment
        _leftover_keys(sec, errors)

    # --- [channel] ----------------------------------------------------------------
    channel = ChannelConfig()
    if "channel" in by_name:
        channel = _build_dataclass(ChannelConfig, by_name["channel"][0], errors) or channel
        _leftover_keys(by_name["channel"][0], errors)

    # --- [event] blocks --------------------------------------------------------------
    events = []
    event_lines = []
    for sec in by_name.get("event", []):
        kind_raw = sec.pop("kind", None)
        try:
            kind = EventKind(str(kind_raw).lower())
        except ValueError:
            errors.append((sec.line, f"unknown event kind {kind_raw!r}"))
            continue
        extra = {"kind": kind}
        if "traffic_condition" in sec.pairs:
            cond_raw, cond_line = sec.pairs.pop("traffic_condition")
            cond_names = {c.name.lower(): c for c in TrafficCondition}
            cond = cond_names.get(str(cond_raw).lower())
            if cond is None:
                errors.append((cond_line, f"unknown traffic_condition {cond_raw!r}"))
            else:
                extra["traffic_condition"] = cond
        ev = _build_dataclass(ScenarioEvent, sec, errors, extra=extra)
        _leftover_keys(sec, errors)
        if ev is not None:
            events.append(ev)
            event_lines.append(sec.line)

    if errors:
        raise ScenarioValidationError(errors)

    try:
        scenario = Scenario(
            name=str(name), duration=float(duration), ego_role_under_test=role,
            road=road, platoon=platoon, other_vehicles=tuple(others),
            candidate=candidate, events=tuple(events), environment=environment,
            channel=channel, i2v_present=bool(i2v_present),
        )
    except (TypeError, ValueError) as exc:
        raise ScenarioValidationError([(sc.line, str(exc))])
    _validate_cross(scenario, sc.line, event_lines, errors)
    if errors:
        raise ScenarioValidationError(errors)
    return scenario


def _validate_cross(s: Scenario, head_line: int, event_lines: list[int],
                    errors: list[tuple[int, str]]) -> None:
    """Whole-scenario invariants that span several sections."""
    p = s.platoon
    if p.lane >= s.road.lanes or p.lane < 0:
        errors.append((head_line, f"platoon lane {p.lane} outside road with {s.road.lanes} lanes"))
    for ov in s.other_vehicles:
        if ov.lane >= s.road.lanes or ov.lane < 0:
            errors.append((head_line, f"vehicle lane {ov.lane} outside road"))
    if p.initial_speed > s.road.speed_limit:
        errors.append((head_line,
                       f"initial_speed {p.initial_speed} exceeds speed_limit {s.road.speed_limit}"))

    role = s.ego_role_under_test
    if role == Role.FOLLOWER and p.n_trucks < 3:
        errors.append((head_line, "role_under_test=follower needs n_trucks >= 3"))
    if role == Role.CANDIDATE and s.candidate is None:
        errors.append((head_line, "role_under_test=candidate needs a [candidate] section"))

    # Initial placement must be collision-free and ordered.
    spans = [(x - u.length, x, f"platoon truck {i}")
             for i, (x, u) in enumerate(zip(initial_positions(s),
                                            [p.params_for(i) for i in range(p.n_trucks)]))]
    if s.candidate is not None:
        cx = candidate_initial_position(s)
        spans.append((cx - s.candidate.params.length, cx, "candidate"))
    for i, ov in enumerate(s.other_vehicles):
        if ov.lane == p.lane:
            spans.append((ov.x_front - ov.length, ov.x_front, f"vehicle {i}"))
    spans.sort()
    for (r0, f0, n0), (r1, f1, n1) in zip(spans, spans[1:]):
        if f0 > r1:
            errors.append((head_line, f"initial positions overlap: {n0} and {n1}"))

    for ev, ln in zip(s.events, event_lines):
        if ev.kind == EventKind.CUT_IN and ev.between_index > p.n_trucks - 2:
            errors.append((ln, f"cut_in between_index {ev.between_index} needs a gap "
                               f"(platoon has {p.n_trucks} trucks)"))
        if ev.kind == EventKind.I2V_BROADCAST and not s.i2v_present:
            errors.append((ln, "i2v_broadcast event in a scenario with i2v_present = false"))
        if ev.kind == EventKind.CANDIDATE_JOIN_REQUEST and s.candidate is None:
            errors.append((ln, "candidate_join_request event needs a [candidate] section"))
        if ev.kind == EventKind.PRECEDING_VEHICLE_BRAKES:
            ahead = [ov for ov in s.other_vehicles
                     if ov.lane == p.lane and ov.x_front - ov.length > 0.0]
            if not ahead:
                errors.append((ln, "preceding_vehicle_brakes needs a scripted vehicle "
                                   "ahead of the leader in the platoon lane"))
        if ev.kind == EventKind.CHANNEL_DEGRADE:
            try:
                replace(s.channel, **ev.channel_overrides())
            except ValueError as exc:
                errors.append((ln, f"channel_degrade overrides invalid: {exc}"))


def initial_positions(s: Scenario) -> list[float]:
    """Front-bumper positions at t=0: leader at x=0, gaps at CACC equilibrium.

    Each following truck starts at its controller's steady state
    (standstill gap + headway * speed), so a quiescent scenario stays
    quiescent from the first tick.
    """
    p = s.platoon
    xs = [0.0]
    for i in range(1, p.n_trucks):
        gap = p.params_for(i).standstill_gap + p.initial_thw * p.initial_speed
        xs.append(xs[-1] - p.params_for(i - 1).length - gap)
    return xs


def candidate_initial_position(s: Scenario) -> float:
    p = s.platoon
    trailing_front = initial_positions(s)[-1]
    speed = s.candidate.speed if s.candidate.speed is not None else p.initial_speed
    gap = s.candidate.params.standstill_gap + s.candidate.gap_behind_thw * speed
    return trailing_front - p.params_for(p.n_trucks - 1).length - gap


# ---------------------------------------------------------------------------
# Serialization (canonical form; parse(serialize(s)) == s)
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Enum):
        return value.name.lower() if isinstance(value, (Role, TrafficCondition)) \
            else value.value
    return str(value)


def serialize_scenario(s: Scenario) -> str:
    out = []

    def section(name, pairs):
        out.append(f"[{name}]")
        for k, v in pairs:
            if v is not None:
                out.append(f"{k} = {_fmt(v)}")
        out.append("")

    section("scenario", [("name", s.name), ("duration", s.duration),
                         ("role_under_test", s.ego_role_under_test),
                         ("i2v_present", s.i2v_present)])
    section("road", [("lanes", s.road.lanes), ("speed_limit", s.road.speed_limit)])
    p = s.platoon
    section("platoon", [("n_trucks", p.n_trucks), ("initial_speed", p.initial_speed),
                        ("initial_thw", p.initial_thw), ("lane", p.lane),
                        ("leader_thw", p.leader_thw), ("platoon_id", p.platoon_id),
                        ("max_size", p.max_size), ("protocol_version", p.protocol_version),
                        ("rate_operational", p.rate_operational),
                        ("rate_tactical", p.rate_tactical)])
    for tp in p.truck_params:
        section("truck", [(k, getattr(tp, k)) for k in _TRUCK_PARAM_KEYS])
    for ov in s.other_vehicles:
        section("vehicle", [("x_front", ov.x_front), ("v", ov.v),
                            ("length", ov.length), ("lane", ov.lane)])
    if s.candidate is not None:
        c = s.candidate
        pairs = [("gap_behind_thw", c.gap_behind_thw), ("speed", c.speed),
                 ("thw_setpoint", c.thw_setpoint), ("protocol_version", c.protocol_version)]
        pairs += [(k, getattr(c.params, k)) for k in _TRUCK_PARAM_KEYS]
        section("candidate", pairs)
    env = s.environment
    section("environment", [("visibility_factor", env.visibility_factor),
                            ("lighting", env.lighting)])
    for seg in env.active_segments:
        section("segment", [("kind", seg.kind), ("from_x", seg.from_x),
                            ("to_x", seg.to_x), ("loss_multiplier", seg.loss_multiplier),
                            ("latency_multiplier", seg.latency_multiplier)])
    section("channel", [(k, getattr(s.channel, k)) for k in _CHANNEL_KEYS])
    for ev in s.events:
        pairs = [("kind", ev.kind), ("t", ev.t), ("when_gap_below", ev.when_gap_below)]
        for f in ("decel", "between_index", "entry_speed", "entry_gap_fraction",
                  "vehicle_length", "speed_limit", "advised_thw", "traffic_condition",
                  "latency_mean", "latency_jitter", "loss_prob",
                  "congestion_extra_latency", "congestion_threshold", "new_thw"):
            pairs.append((f, getattr(ev, f)))
        section("event", pairs)
    return "\n".join(out)


# ---------------------------------------------------------------------------
# World: per-run mutable state built from a scenario
# ---------------------------------------------------------------------------

SCRIPTED_ID_BASE = 1000


@dataclass
class ScriptedVehicle:
    vid: int
    x_front: float
    v: float
    length: float
    lane: int
    a: float = 0.0

    def step(self, dt: float) -> None:
        v_new = max(0.0, self.v + self.a * dt)
        self.x_front += v_new * dt
        self.v = v_new
        if v_new == 0.0 and self.a < 0.0:
            self.a = 0.0


@dataclass
class TruckUnit:
    vid: int
    params: TruckParams
    state: TruckState
    dcl: DclState
    rng: np.random.Generator
    spawned: bool = True


@dataclass
class FiredEvent:
    index: int
    t: float
    kind: EventKind


class World:
    """All mutable state of one simulation run."""

    def __init__(self, scenario: Scenario, role: Role, seed: int = 0,
                 gains: ControllerGains = DEFAULT_GAINS,
                 fallback: FallbackParams = DEFAULT_FALLBACK,
                 channel_override: Optional[ChannelConfig] = None):
        if role not in realizable_roles(scenario):
            raise RoleNotRealizable(
                f"role {role.name} is not realizable in scenario {scenario.name!r}")
        self.scenario = scenario
        self.role_under_test = role
        self.seed = seed
        self.gains = gains
        self.fallback = fallback
        p = scenario.platoon

        members = tuple(range(1, p.n_trucks + 1))
        config = PlatoonConfig(
            platoon_id=p.platoon_id, members=members, max_size=p.max_size,
            least_performing_decel=p.least_performing_decel(),
            comm_update_rate_operational=p.rate_operational,
            comm_update_rate_tactical=p.rate_tactical)
        self.members: list[int] = list(members)

        xs = initial_positions(scenario)
        self.trucks: list[TruckUnit] = []
        for i in range(p.n_trucks):
            vid = i + 1
            role_i = config.role_of(vid)
            thw = p.leader_thw if role_i == Role.LEADER else p.initial_thw
            state = TruckState(
                truck_id=vid, x_front=xs[i], v=p.initial_speed, a=0.0, role=role_i,
                thw_setpoint=thw,
                controller_mode=ControllerMode.MANUAL_LEAD if role_i == Role.LEADER
                else ControllerMode.CACC)
            dcl = DclState(protocol_version=p.protocol_version, config=config,
                           gap_setpoint_cmd=p.initial_thw, platoon_thw_cmd=p.initial_thw)
            if role_i == Role.LEADER:
                dcl.leader = LeaderModelState(set_speed=min(p.initial_speed,
                                                            scenario.road.speed_limit))
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 1, vid))))
            self.trucks.append(TruckUnit(vid, p.params_for(i), state, dcl, rng))

        self.candidate: Optional[TruckUnit] = None
        if scenario.candidate is not None:
            c = scenario.candidate
            vid = p.n_trucks + 1
            speed = c.speed if c.speed is not None else p.initial_speed
            state = TruckState(truck_id=vid, x_front=candidate_initial_position(scenario),
                               v=speed, a=0.0, role=Role.CANDIDATE,
                               thw_setpoint=c.thw_setpoint,
                               controller_mode=ControllerMode.ACC_FALLBACK)
            dcl = DclState(protocol_version=c.protocol_version,
                           gap_setpoint_cmd=c.thw_setpoint)
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 1, vid))))
            self.candidate = TruckUnit(vid, c.params, state, dcl, rng)

        self.others: list[ScriptedVehicle] = [
            ScriptedVehicle(SCRIPTED_ID_BASE + i, ov.x_front, ov.v, ov.length, ov.lane)
            for i, ov in enumerate(scenario.other_vehicles)]
        self._next_scripted = SCRIPTED_ID_BASE + len(self.others)

        cfg = channel_override if channel_override is not None else scenario.channel
        self.channel = Channel(cfg, run_seed=seed)
        self.channel.member_order = list(self.members)
        self.conditions = scenario.environment
        self.fired: list[Optional[FiredEvent]] = [None] * len(scenario.events)
        self.vut_id = self._resolve_vut(role)

    # -- structure ------------------------------------------------------------

    def _resolve_vut(self, role: Role) -> int:
        if role == Role.CANDIDATE:
            return self.candidate.vid
        if role == Role.LEADER:
            return self.members[0]
        if role == Role.TRAILING:
            return self.members[-1]
        return self.members[1]

    def all_trucks(self) -> list[TruckUnit]:
        units = list(self.trucks)
        if self.candidate is not None:
            units.append(self.candidate)
        return units

    def truck_by_id(self, vid: int) -> TruckUnit:
        for u in self.all_trucks():
            if u.vid == vid:
                return u
        raise KeyError(vid)

    def vehicle_views(self) -> list[VehicleView]:
        lane = self.scenario.platoon.lane
        views = [VehicleView(u.vid, u.state.x_front, u.state.v, u.params.length, lane,
                             u.vid in self.members)
                 for u in self.all_trucks()]
        views += [VehicleView(sv.vid, sv.x_front, sv.v, sv.length, sv.lane, False)
                  for sv in self.others]
        return views

    def situation_safe(self) -> bool:
        """No ongoing disturbance within the trailing truck's sensor horizon."""
        trailing = self.truck_by_id(self.members[-1])
        lane = self.scenario.platoon.lane
        rear = min(u.state.x_front - u.params.length
                   for u in self.all_trucks() if u.vid in self.members)
        front = max(u.state.x_front for u in self.all_trucks() if u.vid in self.members)
        for sv in self.others:
            if sv.lane != lane:
                continue
            if sv.a < 0 and abs(sv.x_front - trailing.state.x_front) <= trailing.params.sensor_range:
                return False
            if rear <= sv.x_front <= front:   # inside the platoon span (cut-in)
                return False
        return True

    def leader_gap_ahead(self) -> float:
        leader = self.truck_by_id(self.members[0])
        lane = self.scenario.platoon.lane
        gaps = [sv.x_front - sv.length - leader.state.x_front
                for sv in self.others
                if sv.lane == lane and sv.x_front - sv.length > leader.state.x_front]
        return min(gaps) if gaps else math.inf

    # -- per-tick mechanics --------------------------------------------------

    def deliveries(self, t: float) -> dict[int, list[Message]]:
        inbox: dict[int, list[Message]] = defaultdict(list)
        for entry in self.channel.deliver_due(t):
            inbox[entry.recipient].append(entry.msg)
        return inbox

    def send_outgoing(self, messages: Sequence[Message], t: float) -> None:
        # Membership becomes authoritative the moment a join is accepted,
        # before any message of the same tick hits the medium.
        for msg in messages:
            payload = msg.payload
            if isinstance(payload, JoinResponse) and payload.accepted:
                self.members = list(payload.config.members)
                self.channel.member_order = list(self.members)
        for msg in messages:
            sender_x = None
            try:
                sender_x = self.truck_by_id(msg.source).state.x_front
            except KeyError:
                pass
            eff = environment_modifier(self.channel.cfg, self.conditions, sender_x)
            self.channel.send(msg, t, cfg=eff)

    def broadcast_advisory(self, advisory: I2VAdvisory, t: float) -> None:
        msg = Message(INFRASTRUCTURE, BROADCAST, advisory)
        for u in self.all_trucks():
            eff = environment_modifier(self.channel.cfg, self.conditions, u.state.x_front)
            self.channel.send(msg, t, cfg=eff, recipient=u.vid)

    def step(self, t: float, dt: float) -> list["FiredEvent"]:
        """Advance the whole world by one tick without recording a trace.

        Same order of operations as the recorded closed-loop run: events,
        deliveries, sensing, per-truck control in id order, transmission,
        dynamics.
        """
        fired = fire_events(self.scenario, self, t)
        inbox = self.deliveries(t)
        views = self.vehicle_views()
        units = self.all_trucks()
        meas = {u.vid: sensor_measure(views, u.state, u.params,
                                      self.conditions.visibility_factor, u.rng)
                for u in units}
        safe = self.situation_safe()
        cmds = {}
        outbox: list[Message] = []
        for u in units:
            cmd, out = dcl_step(u.state, u.params, u.dcl,
                                DclInputs(meas[u.vid], tuple(inbox.get(u.vid, ())), dt),
                                t, self.gains, self.fallback, safe)
            cmds[u.vid] = cmd
            outbox.extend(out)
        self.send_outgoing(outbox, t)
        for u in units:
            u.state = step_dynamics(u.state, u.params, cmds[u.vid], dt)
        for sv in self.others:
            sv.step(dt)
        return fired


def instantiate_for_role(s: Scenario, role: Role, seed: int = 0,
                         gains: ControllerGains = DEFAULT_GAINS,
                         fallback: FallbackParams = DEFAULT_FALLBACK,
                         channel_override: Optional[ChannelConfig] = None) -> World:
    """Build the initial world with the truck under test flagged.

    The same scenario yields one assessment target per realizable role;
    raises RoleNotRealizable otherwise.
    """
    return World(s, role, seed=seed, gains=gains, fallback=fallback,
                 channel_override=channel_override)


def fire_events(s: Scenario, world: World, t: float) -> list[FiredEvent]:
    """Fire every event whose time or gap condition is first met at time t.

    Events fire at most once; simultaneous events apply in file order.
    """
    applied: list[FiredEvent] = []
    for i, ev in enumerate(s.events):
        if world.fired[i] is not None:
            continue
        if ev.t is not None:
            due = t + 1e-12 >= ev.t
        else:
            due = world.leader_gap_ahead() <= ev.when_gap_below
        if not due:
            continue
        _apply_event(ev, world, t)
        record = FiredEvent(index=i, t=t, kind=ev.kind)
        world.fired[i] = record
        applied.append(record)
    return applied


def _apply_event(ev: ScenarioEvent, world: World, t: float) -> None:
    s = world.scenario
    lane = s.platoon.lane
    if ev.kind == EventKind.PRECEDING_VEHICLE_BRAKES:
        leader = world.truck_by_id(world.members[0])
        ahead = [sv for sv in world.others
                 if sv.lane == lane and sv.x_front - sv.length > leader.state.x_front]
        target = min(ahead, key=lambda sv: sv.x_front)
        target.a = ev.decel
    elif ev.kind == EventKind.CUT_IN:
        front = world.truck_by_id(world.members[ev.between_index])
        rear = world.truck_by_id(world.members[ev.between_index + 1])
        length = ev.vehicle_length if ev.vehicle_length is not None else 4.5
        free = (front.state.x_front - front.params.length) - rear.state.x_front
        usable = max(free - length, 0.0)
        x_front = rear.state.x_front + ev.entry_gap_fraction * usable + length
        world.others.append(ScriptedVehicle(world._next_scripted, x_front,
                                            ev.entry_speed, length, lane))
        world._next_scripted += 1
    elif ev.kind == EventKind.CANDIDATE_JOIN_REQUEST:
        cand = world.candidate
        req = JoinRequest(candidate=cand.vid,
                          protocol_version=cand.dcl.protocol_version,
                          max_decel_capability=cand.params.max_decel,
                          truck_length=cand.params.length)
        cand.dcl.pending_join = (world.members[-1], req)
    elif ev.kind == EventKind.I2V_BROADCAST:
        advisory = I2VAdvisory(t_tx=t, speed_limit=ev.speed_limit,
                               advised_thw=ev.advised_thw,
                               traffic_condition=ev.traffic_condition)
        world.broadcast_advisory(advisory, t)
    elif ev.kind == EventKind.CHANNEL_DEGRADE:
        world.channel.cfg = replace(world.channel.cfg, **ev.channel_overrides())
    elif ev.kind == EventKind.LEADER_THW_ADJUST:
        leader = world.truck_by_id(world.members[0])
        leader.dcl.platoon_thw_cmd = ev.new_thw
