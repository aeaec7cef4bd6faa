"""Platooning protocol: message types, wire codec, roles and join logic.

Messages are split into an operational layer (hop-by-hop control messages
between adjacent trucks, high rate) and a tactical layer (platoon management
messages relayed through the whole platoon, low rate), plus the one-way
infrastructure advisory channel and the join handshake between a candidate
truck and the trailing truck.

Everything in this module is a pure function of its inputs; message objects
are immutable and safe to share across concurrent simulation runs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Optional, Union

# Reserved addresses (truck ids are ordinary unsigned 32-bit values below these).
INFRASTRUCTURE = 0xFFFFFFFF
BROADCAST = 0xFFFFFFFE
MAX_TRUCK_ID = 0xFFFF0000

# Hard limits baked into the message invariants.
MIN_THW = 0.8            # s, minimum time headway while platooning
MAX_ABS_ACCEL = 12.0     # m/s^2, sanity bound on reported acceleration

DEFAULT_MAX_PLATOON_SIZE = 7
DEFAULT_DECEL_TOLERANCE = 1.0  # m/s^2, candidate decel capability slack


class ProtocolError(Exception):
    """Base class for protocol-level failures."""


class MalformedMessage(ProtocolError):
    """Byte sequence is not a valid encoding of any message."""


class UnknownPlatoon(ProtocolError):
    """Configuration update carries a foreign platoon id."""


class NotAMember(ProtocolError):
    """The local truck is absent from an updated member list."""


class IllegalTransition(ProtocolError):
    """Role transition not permitted for the current role."""


class Role(IntEnum):
    LEADER = 0
    FOLLOWER = 1
    TRAILING = 2
    CANDIDATE = 3


class RoleEvent(IntEnum):
    JOIN_ACCEPTED = 0
    NEW_MEMBER_BEHIND = 1
    MEMBER_AHEAD_LEFT = 2
    SELF_LEAVE = 3
    PLATOON_DISSOLVED = 4


class ManagementKind(IntEnum):
    SPEED_PROFILE_INTENT = 1
    COHESION_REPORT = 2
    PLATOON_UPDATE = 3
    LEAVE_ANNOUNCE = 4


class IntentReason(IntEnum):
    TRAFFIC_JAM_AHEAD = 0
    DOWNHILL = 1
    DRIVER_PREFERENCE = 2
    OTHER = 3


class JoinReason(IntEnum):
    ACCEPTED = 0
    PLATOON_FULL = 1
    INCOMPATIBLE_PROTOCOL = 2
    DECEL_MISMATCH = 3
    UNSAFE_SITUATION = 4


class TrafficCondition(IntEnum):
    FREE = 0
    JAM_AHEAD = 1


def _check_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")


def _check_truck_id(name: str, value: int) -> None:
    if not isinstance(value, int) or not (0 <= value < MAX_TRUCK_ID):
        raise ValueError(f"{name} must be an unsigned truck id < {MAX_TRUCK_ID:#x}, got {value!r}")


@dataclass(frozen=True)
class PlatoonConfig:
    """Shared view of the platoon: ordered membership plus comm parameters.

    ``least_performing_decel`` is the braking-capability magnitude of the
    weakest member; the leader never commands a stronger deceleration.
    """

    platoon_id: int
    members: tuple[int, ...]
    max_size: int = DEFAULT_MAX_PLATOON_SIZE
    least_performing_decel: float = 6.0
    comm_update_rate_operational: float = 20.0  # Hz
    comm_update_rate_tactical: float = 2.0      # Hz

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not (0 <= self.platoon_id < 2**32):
            raise ValueError(f"platoon_id out of range: {self.platoon_id!r}")
        if not (2 <= self.max_size <= 255):
            raise ValueError(f"max_size out of range: {self.max_size!r}")
        if not (2 <= len(self.members) <= self.max_size):
            raise ValueError(
                f"platoon must have between 2 and max_size={self.max_size} members, "
                f"got {len(self.members)}")
        if len(set(self.members)) != len(self.members):
            raise ValueError("duplicate truck id in member list")
        for m in self.members:
            _check_truck_id("member", m)
        if not (0 < self.least_performing_decel <= 10.0):
            raise ValueError(f"least_performing_decel out of range: {self.least_performing_decel}")
        if self.comm_update_rate_operational <= 0 or self.comm_update_rate_tactical <= 0:
            raise ValueError("comm update rates must be positive")
        _check_finite("least_performing_decel", self.least_performing_decel)
        _check_finite("comm_update_rate_operational", self.comm_update_rate_operational)
        _check_finite("comm_update_rate_tactical", self.comm_update_rate_tactical)

    def index_of(self, truck_id: int) -> int:
        try:
            return self.members.index(truck_id)
        except ValueError:
            raise NotAMember(f"truck {truck_id} is not a member of platoon {self.platoon_id}")

    def role_of(self, truck_id: int) -> Role:
        return role_for_index(self.index_of(truck_id), len(self.members))

    def predecessor_of(self, truck_id: int) -> Optional[int]:
        i = self.index_of(truck_id)
        return self.members[i - 1] if i > 0 else None

    def successor_of(self, truck_id: int) -> Optional[int]:
        i = self.index_of(truck_id)
        return self.members[i + 1] if i + 1 < len(self.members) else None


def role_for_index(index: int, n_members: int) -> Role:
    """Role is a pure function of the member index.

    In a 2-truck platoon the rear truck is Trailing (it subsumes the
    Follower control duties); there is no Follower role in that case.
    """
    if n_members < 2:
        raise ValueError("a platoon has at least 2 members")
    if not (0 <= index < n_members):
        raise ValueError(f"index {index} out of range for {n_members} members")
    if index == 0:
        return Role.LEADER
    if index == n_members - 1:
        return Role.TRAILING
    return Role.FOLLOWER


@dataclass(frozen=True)
class ControlMessage:
    """Operational-layer message from a truck to its immediate follower.

    ``commanded_decel`` is the currently commanded deceleration (<= 0 while
    braking, exactly 0 otherwise); ``acceleration`` is the realized value.
    """

    sender: int
    seq: int
    t_tx: float
    speed: float
    acceleration: float
    commanded_decel: float
    gap_setpoint_thw: float

    def __post_init__(self):
        _check_truck_id("sender", self.sender)
        if not (0 <= self.seq < 2**32):
            raise ValueError(f"seq out of range: {self.seq!r}")
        for name in ("t_tx", "speed", "acceleration", "commanded_decel", "gap_setpoint_thw"):
            _check_finite(name, getattr(self, name))
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")
        if abs(self.acceleration) > MAX_ABS_ACCEL:
            raise ValueError(f"|acceleration| must be <= {MAX_ABS_ACCEL}, got {self.acceleration}")
        if self.commanded_decel > 0:
            raise ValueError(f"commanded_decel must be <= 0, got {self.commanded_decel}")
        if self.gap_setpoint_thw < MIN_THW:
            raise ValueError(f"gap_setpoint_thw must be >= {MIN_THW}, got {self.gap_setpoint_thw}")


@dataclass(frozen=True)
class ManagementMessage:
    """Tactical-layer message, relayed hop by hop through the platoon.

    Only the fields belonging to the active ``kind`` are set; all others are
    None. Use the classmethod constructors to build valid instances.
    """

    sender: int
    seq: int
    t_tx: float
    kind: ManagementKind
    intent_decel: Optional[float] = None
    intent_target_speed: Optional[float] = None
    intent_reason: Optional[IntentReason] = None
    cohesion_max_speed: Optional[float] = None
    cohesion_max_accel: Optional[float] = None
    config: Optional[PlatoonConfig] = None

    _FIELDS_BY_KIND = {
        ManagementKind.SPEED_PROFILE_INTENT: ("intent_decel", "intent_target_speed", "intent_reason"),
        ManagementKind.COHESION_REPORT: ("cohesion_max_speed", "cohesion_max_accel"),
        ManagementKind.PLATOON_UPDATE: ("config",),
        ManagementKind.LEAVE_ANNOUNCE: (),
    }

    def __post_init__(self):
        _check_truck_id("sender", self.sender)
        if not (0 <= self.seq < 2**32):
            raise ValueError(f"seq out of range: {self.seq!r}")
        _check_finite("t_tx", self.t_tx)
        kind = ManagementKind(self.kind)
        active = self._FIELDS_BY_KIND[kind]
        all_payload = ("intent_decel", "intent_target_speed", "intent_reason",
                       "cohesion_max_speed", "cohesion_max_accel", "config")
        for name in all_payload:
            value = getattr(self, name)
            if name in active:
                if value is None:
                    raise ValueError(f"{kind.name} requires field {name}")
            elif value is not None:
                raise ValueError(f"field {name} is not meaningful for kind {kind.name}")
        if kind == ManagementKind.SPEED_PROFILE_INTENT:
            _check_finite("intent_decel", self.intent_decel)
            _check_finite("intent_target_speed", self.intent_target_speed)
            if self.intent_decel > 0:
                raise ValueError(f"intent_decel must be <= 0, got {self.intent_decel}")
            if self.intent_target_speed < 0:
                raise ValueError("intent_target_speed must be >= 0")
        if kind == ManagementKind.COHESION_REPORT:
            _check_finite("cohesion_max_speed", self.cohesion_max_speed)
            _check_finite("cohesion_max_accel", self.cohesion_max_accel)
            if self.cohesion_max_speed < 0 or self.cohesion_max_accel < 0:
                raise ValueError("cohesion constraints must be >= 0")

    @classmethod
    def speed_profile_intent(cls, sender, seq, t_tx, decel, target_speed, reason):
        return cls(sender, seq, t_tx, ManagementKind.SPEED_PROFILE_INTENT,
                   intent_decel=decel, intent_target_speed=target_speed,
                   intent_reason=IntentReason(reason))

    @classmethod
    def cohesion_report(cls, sender, seq, t_tx, max_speed, max_accel):
        return cls(sender, seq, t_tx, ManagementKind.COHESION_REPORT,
                   cohesion_max_speed=max_speed, cohesion_max_accel=max_accel)

    @classmethod
    def platoon_update(cls, sender, seq, t_tx, config):
        return cls(sender, seq, t_tx, ManagementKind.PLATOON_UPDATE, config=config)

    @classmethod
    def leave_announce(cls, sender, seq, t_tx):
        return cls(sender, seq, t_tx, ManagementKind.LEAVE_ANNOUNCE)


@dataclass(frozen=True)
class JoinRequest:
    """Request from a candidate truck to the trailing truck, sent from the rear."""

    candidate: int
    protocol_version: int
    max_decel_capability: float  # magnitude, m/s^2
    truck_length: float          # m

    def __post_init__(self):
        _check_truck_id("candidate", self.candidate)
        if not (0 <= self.protocol_version < 2**32):
            raise ValueError(f"protocol_version out of range: {self.protocol_version!r}")
        _check_finite("max_decel_capability", self.max_decel_capability)
        _check_finite("truck_length", self.truck_length)
        if self.max_decel_capability <= 0:
            raise ValueError("max_decel_capability must be > 0")
        if self.truck_length <= 0:
            raise ValueError("truck_length must be > 0")


@dataclass(frozen=True)
class JoinResponse:
    """Trailing truck's verdict; carries the updated config iff accepted."""

    accepted: bool
    reason: JoinReason
    config: Optional[PlatoonConfig] = None

    def __post_init__(self):
        reason = JoinReason(self.reason)
        if self.accepted != (reason == JoinReason.ACCEPTED):
            raise ValueError("accepted flag must match reason")
        if self.accepted != (self.config is not None):
            raise ValueError("config must be present iff accepted")


@dataclass(frozen=True)
class I2VAdvisory:
    """One-way strategic advisory broadcast from the infrastructure."""

    t_tx: float
    speed_limit: Optional[float] = None
    advised_thw: Optional[float] = None
    traffic_condition: Optional[TrafficCondition] = None

    def __post_init__(self):
        _check_finite("t_tx", self.t_tx)
        if self.speed_limit is None and self.advised_thw is None and self.traffic_condition is None:
            raise ValueError("an advisory must carry at least one field")
        if self.speed_limit is not None:
            _check_finite("speed_limit", self.speed_limit)
            if self.speed_limit <= 0:
                raise ValueError("speed_limit must be > 0")
        if self.advised_thw is not None:
            _check_finite("advised_thw", self.advised_thw)
            if self.advised_thw < MIN_THW:
                raise ValueError(f"advised_thw must be >= {MIN_THW}")
        if self.traffic_condition is not None:
            TrafficCondition(self.traffic_condition)


Payload = Union[ControlMessage, ManagementMessage, JoinRequest, JoinResponse, I2VAdvisory]


@dataclass(frozen=True)
class Message:
    """Addressed envelope around any payload.

    V2V payloads carry the sending truck as ``source``; infrastructure
    advisories use ``source = INFRASTRUCTURE`` and ``destination = BROADCAST``.
    """

    source: int
    destination: int
    payload: Payload

    def __post_init__(self):
        p = self.payload
        if isinstance(p, I2VAdvisory):
            if self.source != INFRASTRUCTURE:
                raise ValueError("advisories must originate from the infrastructure")
            if self.destination != BROADCAST and not (0 <= self.destination < MAX_TRUCK_ID):
                raise ValueError("advisory destination must be broadcast or a truck id")
        else:
            _check_truck_id("source", self.source)
            _check_truck_id("destination", self.destination)
            if isinstance(p, (ControlMessage, ManagementMessage)) and p.sender != self.source:
                raise ValueError("payload sender must match envelope source")
            if isinstance(p, JoinRequest) and p.candidate != self.source:
                raise ValueError("join request source must be the candidate")


# ---------------------------------------------------------------------------
# Wire codec
#
# Frame layout (little-endian, length-prefixed, self-delimiting):
#   u16 body_length | body
#   body := u8 payload_tag | u32 source | u32 destination | payload
# See docs/wire-format.md for the full field tables.
# ---------------------------------------------------------------------------

_TAG_CONTROL = 1
_TAG_MANAGEMENT = 2
_TAG_JOIN_REQUEST = 3
_TAG_JOIN_RESPONSE = 4
_TAG_I2V = 5

_HEAD = struct.Struct("<BII")          # tag, source, destination
_CONTROL = struct.Struct("<IIddddd")   # sender, seq, t_tx, speed, accel, cmd_decel, gap_thw
_MGMT_HEAD = struct.Struct("<IIdB")    # sender, seq, t_tx, kind
_INTENT = struct.Struct("<ddB")        # decel, target_speed, reason
_COHESION = struct.Struct("<dd")       # max_speed, max_accel
_JOIN_REQ = struct.Struct("<IIdd")     # candidate, version, max_decel, length
_JOIN_RESP_HEAD = struct.Struct("<BB")  # accepted, reason
_CONFIG_HEAD = struct.Struct("<IB")    # platoon_id, n_members
_CONFIG_TAIL = struct.Struct("<Bddd")  # max_size, least_decel, rate_op, rate_tac
_I2V_HEAD = struct.Struct("<dB")       # t_tx, presence mask


def _encode_config(cfg: PlatoonConfig) -> bytes:
    parts = [_CONFIG_HEAD.pack(cfg.platoon_id, len(cfg.members))]
    parts.append(struct.pack(f"<{len(cfg.members)}I", *cfg.members))
    parts.append(_CONFIG_TAIL.pack(cfg.max_size, cfg.least_performing_decel,
                                   cfg.comm_update_rate_operational,
                                   cfg.comm_update_rate_tactical))
    return b"".join(parts)


class _Reader:
    """Cursor over a byte buffer; every short read raises MalformedMessage."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: struct.Struct):
        end = self.pos + fmt.size
        if end > len(self.data):
            raise MalformedMessage("truncated message body")
        values = fmt.unpack_from(self.data, self.pos)
        self.pos = end
        return values

    def take_raw(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise MalformedMessage("truncated message body")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def exhausted(self) -> bool:
        return self.pos == len(self.data)


def _decode_config(r: _Reader) -> PlatoonConfig:
    platoon_id, n = r.take(_CONFIG_HEAD)
    members = struct.unpack(f"<{n}I", r.take_raw(4 * n))
    max_size, least, rate_op, rate_tac = r.take(_CONFIG_TAIL)
    return PlatoonConfig(platoon_id, members, max_size, least, rate_op, rate_tac)


def encode_message(msg: Message) -> bytes:
    """Encode a message into its self-delimiting wire frame."""
    p = msg.payload
    if isinstance(p, ControlMessage):
        body = _HEAD.pack(_TAG_CONTROL, msg.source, msg.destination) + _CONTROL.pack(
            p.sender, p.seq, p.t_tx, p.speed, p.acceleration, p.commanded_decel,
            p.gap_setpoint_thw)
    elif isinstance(p, ManagementMessage):
        body = _HEAD.pack(_TAG_MANAGEMENT, msg.source, msg.destination) + _MGMT_HEAD.pack(
            p.sender, p.seq, p.t_tx, int(p.kind))
        if p.kind == ManagementKind.SPEED_PROFILE_INTENT:
            body += _INTENT.pack(p.intent_decel, p.intent_target_speed, int(p.intent_reason))
        elif p.kind == ManagementKind.COHESION_REPORT:
            body += _COHESION.pack(p.cohesion_max_speed, p.cohesion_max_accel)
        elif p.kind == ManagementKind.PLATOON_UPDATE:
            body += _encode_config(p.config)
    elif isinstance(p, JoinRequest):
        body = _HEAD.pack(_TAG_JOIN_REQUEST, msg.source, msg.destination) + _JOIN_REQ.pack(
            p.candidate, p.protocol_version, p.max_decel_capability, p.truck_length)
    elif isinstance(p, JoinResponse):
        body = _HEAD.pack(_TAG_JOIN_RESPONSE, msg.source, msg.destination)
        body += _JOIN_RESP_HEAD.pack(1 if p.accepted else 0, int(p.reason))
        if p.accepted:
            body += _encode_config(p.config)
    elif isinstance(p, I2VAdvisory):
        mask = ((1 if p.speed_limit is not None else 0)
                | (2 if p.advised_thw is not None else 0)
                | (4 if p.traffic_condition is not None else 0))
        body = _HEAD.pack(_TAG_I2V, msg.source, msg.destination) + _I2V_HEAD.pack(p.t_tx, mask)
        if p.speed_limit is not None:
            body += struct.pack("<d", p.speed_limit)
        if p.advised_thw is not None:
            body += struct.pack("<d", p.advised_thw)
        if p.traffic_condition is not None:
            body += struct.pack("<B", int(p.traffic_condition))
    else:
        raise TypeError(f"unsupported payload type: {type(p).__name__}")
    if len(body) > 0xFFFF:
        raise ValueError("message body exceeds frame capacity")
    return struct.pack("<H", len(body)) + body


def _decode_body(body: bytes) -> Message:
    r = _Reader(body)
    tag, source, destination = r.take(_HEAD)
    try:
        if tag == _TAG_CONTROL:
            payload: Payload = ControlMessage(*r.take(_CONTROL))
        elif tag == _TAG_MANAGEMENT:
            sender, seq, t_tx, kind_raw = r.take(_MGMT_HEAD)
            try:
                kind = ManagementKind(kind_raw)
            except ValueError:
                raise MalformedMessage(f"unknown management kind {kind_raw}")
            if kind == ManagementKind.SPEED_PROFILE_INTENT:
                decel, target, reason_raw = r.take(_INTENT)
                payload = ManagementMessage.speed_profile_intent(
                    sender, seq, t_tx, decel, target, IntentReason(reason_raw))
            elif kind == ManagementKind.COHESION_REPORT:
                max_speed, max_accel = r.take(_COHESION)
                payload = ManagementMessage.cohesion_report(sender, seq, t_tx, max_speed, max_accel)
            elif kind == ManagementKind.PLATOON_UPDATE:
                payload = ManagementMessage.platoon_update(sender, seq, t_tx, _decode_config(r))
            else:
                payload = ManagementMessage.leave_announce(sender, seq, t_tx)
        elif tag == _TAG_JOIN_REQUEST:
            payload = JoinRequest(*r.take(_JOIN_REQ))
        elif tag == _TAG_JOIN_RESPONSE:
            accepted_raw, reason_raw = r.take(_JOIN_RESP_HEAD)
            if accepted_raw not in (0, 1):
                raise MalformedMessage(f"invalid accepted flag {accepted_raw}")
            config = _decode_config(r) if accepted_raw else None
            payload = JoinResponse(bool(accepted_raw), JoinReason(reason_raw), config)
        elif tag == _TAG_I2V:
            t_tx, mask = r.take(_I2V_HEAD)
            if mask & ~0x7:
                raise MalformedMessage(f"invalid advisory presence mask {mask:#x}")
            speed_limit = struct.unpack("<d", r.take_raw(8))[0] if mask & 1 else None
            advised_thw = struct.unpack("<d", r.take_raw(8))[0] if mask & 2 else None
            condition = TrafficCondition(r.take_raw(1)[0]) if mask & 4 else None
            payload = I2VAdvisory(t_tx, speed_limit, advised_thw, condition)
        else:
            raise MalformedMessage(f"unknown payload tag {tag}")
        if not r.exhausted():
            raise MalformedMessage("unexpected bytes after payload")
        return Message(source, destination, payload)
    except ValueError as exc:  # invariant violated after decode, or bad enum value
        raise MalformedMessage(str(exc)) from exc


def decode_message(data: bytes) -> Message:
    """Decode exactly one message frame; raises MalformedMessage otherwise."""
    if len(data) < 2:
        raise MalformedMessage("truncated length prefix")
    (body_len,) = struct.unpack_from("<H", data, 0)
    if len(data) < 2 + body_len:
        raise MalformedMessage("truncated frame")
    if len(data) > 2 + body_len:
        raise MalformedMessage("trailing bytes after frame")
    return _decode_body(data[2:])


def iter_decode(data: bytes) -> Iterator[Message]:
    """Decode a concatenation of frames, e.g. a recorded message log."""
    pos = 0
    while pos < len(data):
        if pos + 2 > len(data):
            raise MalformedMessage("truncated length prefix")
        (body_len,) = struct.unpack_from("<H", data, pos)
        end = pos + 2 + body_len
        if end > len(data):
            raise MalformedMessage("truncated frame")
        yield _decode_body(data[pos + 2:end])
        pos = end


# ---------------------------------------------------------------------------
# Join handshake and platoon configuration maintenance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrailingView:
    """What the trailing truck knows when it arbitrates a join request."""

    config: PlatoonConfig
    protocol_version: int
    situation_safe: bool


def handle_join_request(trailing_view: TrailingView, req: JoinRequest,
                        decel_tolerance: float = DEFAULT_DECEL_TOLERANCE) -> JoinResponse:
    """Arbitrate a join request against the four admission requirements.

    The checks run in a fixed order (platoon full, protocol compatibility,
    deceleration capability, situation safety) so the reported rejection
    reason is deterministic when several requirements fail at once. On
    acceptance the returned config appends the candidate as the new last
    member and lowers ``least_performing_decel`` if the newcomer is weaker.
    """
    cfg = trailing_view.config
    if req.candidate in cfg.members:
        raise ValueError(f"candidate {req.candidate} is already a platoon member")
    if len(cfg.members) >= cfg.max_size:
        return JoinResponse(False, JoinReason.PLATOON_FULL)
    if req.protocol_version != trailing_view.protocol_version:
        return JoinResponse(False, JoinReason.INCOMPATIBLE_PROTOCOL)
    if req.max_decel_capability < cfg.least_performing_decel - decel_tolerance:
        return JoinResponse(False, JoinReason.DECEL_MISMATCH)
    if not trailing_view.situation_safe:
        return JoinResponse(False, JoinReason.UNSAFE_SITUATION)
    new_cfg = PlatoonConfig(
        platoon_id=cfg.platoon_id,
        members=cfg.members + (req.candidate,),
        max_size=cfg.max_size,
        least_performing_decel=min(cfg.least_performing_decel, req.max_decel_capability),
        comm_update_rate_operational=cfg.comm_update_rate_operational,
        comm_update_rate_tactical=cfg.comm_update_rate_tactical,
    )
    return JoinResponse(True, JoinReason.ACCEPTED, new_cfg)


def apply_platoon_update(old: PlatoonConfig, update: PlatoonConfig, caller: int) -> PlatoonConfig:
    """Adopt a configuration update received from the rear.

    Raises UnknownPlatoon on a foreign platoon id and NotAMember when the
    caller has been dropped from the member list. The caller's new role
    follows from its index in the updated member list (``role_of``).
    """
    if update.platoon_id != old.platoon_id:
        raise UnknownPlatoon(
            f"update for platoon {update.platoon_id}, expected {old.platoon_id}")
    if caller not in update.members:
        raise NotAMember(f"truck {caller} dropped from platoon {update.platoon_id}")
    return update


_ROLE_TRANSITIONS = {
    (Role.CANDIDATE, RoleEvent.JOIN_ACCEPTED): Role.TRAILING,
    (Role.TRAILING, RoleEvent.NEW_MEMBER_BEHIND): Role.FOLLOWER,
    (Role.FOLLOWER, RoleEvent.NEW_MEMBER_BEHIND): Role.FOLLOWER,
    (Role.LEADER, RoleEvent.NEW_MEMBER_BEHIND): Role.LEADER,
    (Role.FOLLOWER, RoleEvent.MEMBER_AHEAD_LEFT): Role.FOLLOWER,
    (Role.TRAILING, RoleEvent.MEMBER_AHEAD_LEFT): Role.TRAILING,
    (Role.LEADER, RoleEvent.SELF_LEAVE): Role.CANDIDATE,
    (Role.FOLLOWER, RoleEvent.SELF_LEAVE): Role.CANDIDATE,
    (Role.TRAILING, RoleEvent.SELF_LEAVE): Role.CANDIDATE,
    (Role.LEADER, RoleEvent.PLATOON_DISSOLVED): Role.CANDIDATE,
    (Role.FOLLOWER, RoleEvent.PLATOON_DISSOLVED): Role.CANDIDATE,
    (Role.TRAILING, RoleEvent.PLATOON_DISSOLVED): Role.CANDIDATE,
}


def role_transition(current: Role, event: RoleEvent) -> Role:
    """Advance the per-truck role state machine.

    A follower that ends up at index 0 after members ahead left is promoted
    by apply_platoon_update/role_of, not here; this machine only covers the
    locally observable events.
    """
    try:
        return _ROLE_TRANSITIONS[(Role(current), RoleEvent(event))]
    except KeyError:
        raise IllegalTransition(f"event {RoleEvent(event).name} not legal for role {Role(current).name}")
