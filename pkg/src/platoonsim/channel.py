"""Simulated V2V/I2V medium: latency, jitter, loss and congestion.

The channel owns a queue of in-flight messages and delivers them in a total
deterministic order (delivery time, then send order). Every sender draws
from its own seeded sub-stream, so adding a truck to a scenario does not
perturb the randomness seen by the others. V2V traffic is checked against
the hop-by-hop rule: control and management messages may only travel
between adjacent platoon positions (or between the trailing truck and a
joining candidate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .protocol import (
    BROADCAST,
    INFRASTRUCTURE,
    ControlMessage,
    I2VAdvisory,
    JoinRequest,
    JoinResponse,
    ManagementMessage,
    Message,
)


class NonAdjacentDestination(ValueError):
    """A V2V message tried to skip a hop."""


@dataclass(frozen=True)
class ChannelConfig:
    """Stochastic medium parameters.

    Jitter is the half-width of a uniform latency perturbation (bounded
    worst case); the congestion penalty applies while more than
    ``congestion_threshold`` messages are in flight.
    """

    latency_mean: float = 0.02
    latency_jitter: float = 0.0
    loss_prob: float = 0.0
    congestion_extra_latency: float = 0.05
    congestion_threshold: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.latency_mean < 0:
            raise ValueError("latency_mean must be >= 0")
        if not (0.0 <= self.loss_prob <= 1.0):
            raise ValueError("loss_prob must be within [0, 1]")
        if self.latency_jitter < 0 or self.latency_jitter > self.latency_mean:
            raise ValueError("jitter must satisfy 0 <= jitter <= latency_mean")
        if self.congestion_extra_latency < 0:
            raise ValueError("congestion_extra_latency must be >= 0")
        if self.congestion_threshold < 0:
            raise ValueError("congestion_threshold must be >= 0")


@dataclass
class InFlightMessage:
    msg: Message
    t_send: float
    t_deliver: float
    dropped: bool
    recipient: int     # routing target (broadcasts fan out to one per truck)
    order: int         # global send counter, tie-break for equal t_deliver


def transmit(cfg: ChannelConfig, msg: Message, t: float,
             rng: np.random.Generator, in_flight: int = 0,
             recipient: Optional[int] = None, order: int = 0) -> InFlightMessage:
    """Schedule one message on the medium.

    Draws loss and jitter from the given stream (always both draws, so the
    stream advances identically whatever the parameters); applies the
    congestion penalty when the in-flight count exceeds the threshold.
    """
    dropped = rng.random() < cfg.loss_prob
    latency = cfg.latency_mean + rng.uniform(-cfg.latency_jitter, cfg.latency_jitter)
    if in_flight > cfg.congestion_threshold:
        latency += cfg.congestion_extra_latency
    t_deliver = math.inf if dropped else t + latency
    return InFlightMessage(msg=msg, t_send=t, t_deliver=t_deliver, dropped=dropped,
                           recipient=msg.destination if recipient is None else recipient,
                           order=order)


def deliver_due(queue: list[InFlightMessage], t: float) -> list[InFlightMessage]:
    """Remove and return all undropped messages due by time t.

    The result is totally ordered by (delivery time, send order); dropped
    entries are discarded from the queue but never returned.
    """
    due = [m for m in queue if m.dropped or m.t_deliver <= t]
    if not due:
        return []
    queue[:] = [m for m in queue if not (m.dropped or m.t_deliver <= t)]
    live = [m for m in due if not m.dropped]
    live.sort(key=lambda m: (m.t_deliver, m.order))
    return live


def check_adjacency(msg: Message, member_order: Sequence[int]) -> None:
    """Enforce the hop-by-hop rule for V2V payloads.

    Control and management messages must connect adjacent platoon
    positions; the join handshake runs between the trailing truck and an
    outside candidate; advisories are infrastructure broadcasts.
    """
    p = msg.payload
    if isinstance(p, I2VAdvisory):
        return
    index = {vid: i for i, vid in enumerate(member_order)}
    if isinstance(p, (ControlMessage, ManagementMessage)):
        si, di = index.get(msg.source), index.get(msg.destination)
        if si is None or di is None or abs(si - di) != 1:
            raise NonAdjacentDestination(
                f"{type(p).__name__} from {msg.source} to {msg.destination} "
                f"is not a single hop in {list(member_order)}")
    elif isinstance(p, JoinRequest):
        if not member_order or msg.destination != member_order[-1]:
            raise NonAdjacentDestination("join requests must address the trailing truck")
    elif isinstance(p, JoinResponse):
        if not member_order or msg.source != member_order[-2] and msg.source != member_order[-1]:
            raise NonAdjacentDestination("join responses must come from the trailing truck")


def environment_modifier(base: ChannelConfig, conditions, x: Optional[float] = None,
                         ) -> ChannelConfig:
    """Degrade the channel inside infrastructure segments (tunnels, bridges).

    Multiplies loss probability (clamped to 1) and latency by the factors of
    every segment that contains ``x``; with ``x=None`` all segments apply.
    ``conditions`` is any object with an ``active_segments`` sequence of
    (kind, from_x, to_x, loss_multiplier, latency_multiplier) records.
    """
    loss = base.loss_prob
    latency = base.latency_mean
    jitter = base.latency_jitter
    for seg in getattr(conditions, "active_segments", ()):
        if x is not None and not (seg.from_x <= x <= seg.to_x):
            continue
        loss *= seg.loss_multiplier
        latency *= seg.latency_multiplier
        jitter *= seg.latency_multiplier
    if loss == base.loss_prob and latency == base.latency_mean:
        return base
    return replace(base, loss_prob=min(loss, 1.0), latency_mean=latency,
                   latency_jitter=jitter)


class Channel:
    """One simulation's medium: per-sender streams, queue, and full log."""

    def __init__(self, cfg: ChannelConfig, run_seed: int = 0):
        self.cfg = cfg
        self.run_seed = run_seed
        self.queue: list[InFlightMessage] = []
        self.log: list[InFlightMessage] = []
        self.member_order: list[int] = []
        self._rngs: dict[int, np.random.Generator] = {}
        self._order = 0

    def rng_for(self, sender: int) -> np.random.Generator:
        rng = self._rngs.get(sender)
        if rng is None:
            seq = np.random.SeedSequence((self.run_seed, 2, self.cfg.seed, sender))
            rng = np.random.Generator(np.random.PCG64(seq))
            self._rngs[sender] = rng
        return rng

    def send(self, msg: Message, t: float, cfg: Optional[ChannelConfig] = None,
             recipient: Optional[int] = None) -> InFlightMessage:
        """Validate adjacency and put one message in flight."""
        check_adjacency(msg, self.member_order)
        eff = cfg if cfg is not None else self.cfg
        entry = transmit(eff, msg, t, self.rng_for(msg.source),
                         in_flight=len(self.queue), recipient=recipient,
                         order=self._order)
        self._order += 1
        self.queue.append(entry)
        self.log.append(entry)
        return entry

    def broadcast(self, msg: Message, t: float, recipients: Sequence[int],
                  cfg: Optional[ChannelConfig] = None) -> list[InFlightMessage]:
        """Fan an infrastructure broadcast out to each recipient."""
        return [self.send(msg, t, cfg=cfg, recipient=r) for r in recipients]

    def deliver_due(self, t: float) -> list[InFlightMessage]:
        return deliver_due(self.queue, t)
