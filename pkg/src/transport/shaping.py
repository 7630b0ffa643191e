"""
Link model: per-link token buckets and background traffic profiles.

A link's effective rate at time t is its capacity minus background traffic
aimed at it, capped by the broker's capacity minus background traffic aimed
at the broker. Tokens refill every simulated millisecond, so transmissions
finish on millisecond ticks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List

from src.errors import InvariantViolation
from src.transport.base import BROKER_ID

TICK_S = 0.001
# Protocol traffic always keeps this share of the nominal rate.
MIN_RESIDUAL_SHARE = 0.05


def ceil_to_tick(t: float) -> float:
    return math.ceil(round(t / TICK_S, 6)) * TICK_S


@dataclass(frozen=True)
class TrafficProfile:
    """Background load in the style of an iPerf run: aggregate rate over a window."""

    start: float
    duration: float
    rate: float
    parallel_streams: int = 1
    packet_size: int = 131072
    target: str = BROKER_ID

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise InvariantViolation("traffic duration must be > 0")
        if self.rate <= 0:
            raise InvariantViolation("traffic rate must be > 0")
        if self.parallel_streams < 1 or self.packet_size < 1:
            raise InvariantViolation("parallel_streams and packet_size must be >= 1")
        if self.start < 0:
            raise InvariantViolation("traffic start must be >= 0")

    @property
    def end(self) -> float:
        return self.start + self.duration

    def active(self, t: float) -> bool:
        return self.start <= t < self.end


@dataclass
class LinkState:
    node: str
    capacity: float
    latency_ms: float
    up: bool = True

    def __post_init__(self) -> None:
        if self.capacity <= 0:
            raise InvariantViolation(f"link {self.node}: capacity must be > 0")
        if self.latency_ms < 0:
            raise InvariantViolation(f"link {self.node}: latency must be >= 0")

    @property
    def latency_s(self) -> float:
        return self.latency_ms / 1000.0


@dataclass
class BackgroundLoad:
    profiles: List[TrafficProfile] = field(default_factory=list)

    def add(self, profile: TrafficProfile) -> None:
        self.profiles.append(profile)

    def rate_at(self, target: str, t: float) -> float:
        return sum(p.rate for p in self.profiles if p.target == target and p.active(t))

    def next_change(self, target: str, t: float) -> float:
        edges = [
            edge
            for p in self.profiles
            if p.target == target
            for edge in (p.start, p.end)
            if edge > t
        ]
        return min(edges, default=math.inf)


class TokenBucket:
    """FIFO serializer for one direction of a link."""

    def __init__(self, rate_at: Callable[[float], float], next_change: Callable[[float], float]) -> None:
        self._rate_at = rate_at
        self._next_change = next_change
        self.free_at = 0.0

    def transmit(self, now: float, nbytes: int) -> float:
        """Queue `nbytes` behind earlier traffic; return the finishing tick."""
        start = max(now, self.free_at)
        finish = ceil_to_tick(self._drain(start, nbytes * 8.0))
        self.free_at = finish
        return finish

    def _drain(self, t: float, bits: float) -> float:
        while True:
            rate = self._rate_at(t)
            edge = self._next_change(t)
            span = edge - t
            if bits <= rate * span:
                return t + bits / rate
            bits -= rate * span
            t = edge

    def reset(self, now: float) -> None:
        self.free_at = now


class Link:
    """A node's access link with separate uplink and downlink buckets."""

    def __init__(self, state: LinkState, broker: LinkState, load: BackgroundLoad) -> None:
        self.state = state
        self._broker = broker
        self._load = load
        self.uplink = TokenBucket(self.rate_at, self.next_change)
        self.downlink = TokenBucket(self.rate_at, self.next_change)

    def rate_at(self, t: float) -> float:
        own = self.state.capacity - self._load.rate_at(self.state.node, t)
        shared = self._broker.capacity - self._load.rate_at(BROKER_ID, t)
        floor = MIN_RESIDUAL_SHARE * min(self.state.capacity, self._broker.capacity)
        return max(min(own, shared), floor)

    def next_change(self, t: float) -> float:
        return min(self._load.next_change(self.state.node, t), self._load.next_change(BROKER_ID, t))

    def cut(self, now: float) -> None:
        self.uplink.reset(now)
        self.downlink.reset(now)
