"""
Deterministic discrete-event MQTT broker simulation.

Every message travels two hops: the publisher's uplink to the broker, then
the subscriber's downlink. Each hop serializes FIFO through a token bucket
and adds the link latency. A link or broker fault cancels every hop in flight
on the affected links; those messages are lost or, for QoS 1 in persistent
session mode, queued again (publisher outbox or subscriber session).

Events run in (time, insertion sequence) order and every processed event is
folded into a SHA-256 trace digest.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Tuple

from src.errors import Disconnected, InvariantViolation
from src.logs import TRACE
from src.transport.base import (
    BROKER_ID,
    ConnectionListener,
    Handler,
    Message,
    PublishTicket,
    SessionMode,
    SubscriptionId,
    TimerHandle,
    Transport,
)
from src.transport.shaping import BackgroundLoad, Link, LinkState, TrafficProfile
from src.transport.topics import TopicTrie, topic_kind, validate_topic

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY_BPS = 1_000_000_000.0
DEFAULT_LATENCY_MS = 1.0


class _Event(TimerHandle):
    __slots__ = ("time", "seq", "label", "callback", "_cancelled")

    def __init__(self, time: float, seq: int, label: str, callback: Callable[[], None]) -> None:
        self.time = time
        self.seq = seq
        self.label = label
        self.callback = callback
        self._cancelled = False

    def __lt__(self, other: "_Event") -> bool:
        return (self.time, self.seq) < (other.time, other.seq)

    def cancel(self) -> None:
        self._cancelled = True

    @property
    def cancelled(self) -> bool:
        return self._cancelled


class EventLoop:
    """Min-heap of events ordered by (timestamp, insertion sequence)."""

    def __init__(self) -> None:
        self.now = 0.0
        self._queue: List[_Event] = []
        self._seq = itertools.count()
        self._digest = hashlib.sha256()
        self.processed = 0

    def call_at(self, t: float, label: str, callback: Callable[[], None]) -> _Event:
        if t < self.now:
            raise InvariantViolation(f"cannot schedule {label!r} in the past ({t} < {self.now})")
        event = _Event(t, next(self._seq), label, callback)
        heapq.heappush(self._queue, event)
        return event

    def call_later(self, delay: float, label: str, callback: Callable[[], None]) -> _Event:
        return self.call_at(self.now + max(0.0, delay), label, callback)

    @property
    def pending(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)

    def next_time(self) -> Optional[float]:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].time if self._queue else None

    def run_until(self, t: float) -> int:
        if t < self.now:
            raise InvariantViolation(f"run_until({t}) is earlier than now ({self.now})")
        count = 0
        while True:
            head = self.next_time()
            if head is None or head > t:
                break
            event = heapq.heappop(self._queue)
            self.now = event.time
            self._digest.update(f"{event.time:.6f}|{event.seq}|{event.label}\n".encode("utf-8"))
            event.callback()
            count += 1
        self.now = max(self.now, t) if t != float("inf") else self.now
        self.processed += count
        return count

    def trace_digest(self) -> str:
        return self._digest.hexdigest()


@dataclass
class TransportStats:
    """Per-stream counters; legs == delivered + dropped + queued + in_flight at all times."""

    published: Counter = field(default_factory=Counter)
    legs: Counter = field(default_factory=Counter)
    delivered: Counter = field(default_factory=Counter)
    dropped: Counter = field(default_factory=Counter)
    queued: Counter = field(default_factory=Counter)
    in_flight: Counter = field(default_factory=Counter)
    bytes_published: int = 0

    def balanced(self, kind: Optional[str] = None) -> bool:
        kinds = [kind] if kind else set(self.legs) | set(self.published)
        return all(
            self.legs[k] == self.delivered[k] + self.dropped[k] + self.queued[k] + self.in_flight[k]
            for k in kinds
        )


@dataclass
class _Subscription:
    client: str
    pattern: str
    handler: Handler
    qos: int


@dataclass
class _Session:
    client: str
    listener: Optional[ConnectionListener]
    connected: bool = True
    subscriptions: Dict[str, _Subscription] = field(default_factory=dict)
    pending: Deque[Tuple[Message, str]] = field(default_factory=deque)
    outbox: Deque[Message] = field(default_factory=deque)


class SimBroker(Transport):
    """Simulated broker, links and clock behind the Transport interface."""

    def __init__(
        self,
        *,
        session_mode: SessionMode = SessionMode.PERSISTENT,
        default_capacity_bps: float = DEFAULT_CAPACITY_BPS,
        default_latency_ms: float = DEFAULT_LATENCY_MS,
        broker_capacity_bps: float = DEFAULT_CAPACITY_BPS,
    ) -> None:
        self.session_mode = SessionMode(session_mode)
        self.loop = EventLoop()
        self.load = BackgroundLoad()
        self.stats = TransportStats()
        self._default_capacity = default_capacity_bps
        self._default_latency = default_latency_ms
        self._broker = LinkState(BROKER_ID, broker_capacity_bps, 0.0)
        self._up_flight: Dict[str, Dict[int, Tuple[_Event, Message]]] = {}
        self._down_flight: Dict[str, Dict[int, Tuple[_Event, Message, _Subscription]]] = {}
        self._links: Dict[str, Link] = {}
        self._sessions: Dict[str, _Session] = {}
        self._trie: TopicTrie[_Subscription] = TopicTrie()
        self._mids = itertools.count(1)

    # Topology.

    def add_link(self, node: str, capacity_bps: Optional[float] = None, latency_ms: Optional[float] = None) -> LinkState:
        state = LinkState(
            node,
            capacity_bps if capacity_bps is not None else self._default_capacity,
            latency_ms if latency_ms is not None else self._default_latency,
        )
        self._links[node] = Link(state, self._broker, self.load)
        return state

    def link_state(self, node: str) -> LinkState:
        return self._link(node).state

    def _link(self, node: str) -> Link:
        if node not in self._links:
            self.add_link(node)
        return self._links[node]

    @property
    def broker_up(self) -> bool:
        return self._broker.up

    # Transport interface.

    def now(self) -> float:
        return self.loop.now

    def register(self, client: str, listener: ConnectionListener) -> None:
        self._link(client)
        session = self._sessions.get(client)
        if session is None:
            self._sessions[client] = _Session(client, listener, connected=self._reachable(client))
        else:
            session.listener = listener

    def is_connected(self, client: str) -> bool:
        session = self._sessions.get(client)
        return bool(session and session.connected)

    def _reachable(self, client: str) -> bool:
        return self._broker.up and self._link(client).state.up

    def publish(self, client: str, topic: str, payload: bytes, qos: int = 1) -> PublishTicket:
        validate_topic(topic)
        if qos not in (0, 1):
            raise InvariantViolation(f"qos must be 0 or 1, got {qos}")
        if not self.is_connected(client):
            raise Disconnected(f"{client} cannot publish to {topic}: not connected")
        message = Message(topic, bytes(payload), qos, client, next(self._mids))
        kind = topic_kind(topic)
        self.stats.published[kind] += 1
        self.stats.legs[kind] += 1
        self.stats.in_flight[kind] += 1
        self.stats.bytes_published += len(message.payload)
        self._send_uplink(message)
        return PublishTicket(message.mid, topic, qos, len(message.payload))

    def subscribe(self, client: str, pattern: str, handler: Handler, qos: int = 1) -> SubscriptionId:
        validate_topic(pattern, allow_wildcards=True)
        if not self.is_connected(client):
            raise Disconnected(f"{client} cannot subscribe to {pattern}: not connected")
        session = self._sessions[client]
        sub = _Subscription(client, pattern, handler, qos)
        session.subscriptions[pattern] = sub
        self._trie.insert(pattern, client, sub)
        return SubscriptionId(client, pattern)

    def unsubscribe(self, sub: SubscriptionId) -> None:
        session = self._sessions.get(sub.client)
        if session and session.subscriptions.pop(sub.pattern, None) is not None:
            self._trie.remove(sub.pattern, sub.client)

    def call_later(self, client: str, delay: float, callback: Callable[[], None]) -> TimerHandle:
        return self.loop.call_later(delay, f"timer {client}", callback)

    # Faults and load.

    def set_link(self, node: str, up: bool, at: Optional[float] = None) -> None:
        at = self.loop.now if at is None else at
        label = f"link {node} {'up' if up else 'down'}"
        if node == BROKER_ID:
            self.loop.call_at(at, label, lambda: self._apply_broker(up))
        else:
            self._link(node)
            self.loop.call_at(at, label, lambda: self._apply_link(node, up))

    def add_background_traffic(self, profile: TrafficProfile) -> None:
        self.load.add(profile)
        logger.debug(
            "background %.0f bit/s on %s for [%.1f, %.1f) s (%d streams)",
            profile.rate,
            profile.target,
            profile.start,
            profile.end,
            profile.parallel_streams,
        )

    def run_until(self, t: float) -> int:
        return self.loop.run_until(t)

    def run_to_quiescence(self, max_t: float = float("inf")) -> int:
        count = 0
        while True:
            head = self.loop.next_time()
            if head is None or head > max_t:
                break
            count += self.loop.run_until(head)
        return count

    def trace_digest(self) -> str:
        return self.loop.trace_digest()

    # Hop 1: publisher uplink.

    def _send_uplink(self, message: Message) -> None:
        link = self._link(message.publisher)
        finish = link.uplink.transmit(self.loop.now, len(message.payload))
        flights = self._up_flight.setdefault(message.publisher, {})
        event = self.loop.call_at(
            finish + link.state.latency_s,
            f"arrive {message.publisher} {message.topic} {message.mid}",
            lambda: self._arrive(message, event.seq),
        )
        flights[event.seq] = (event, message)

    def _arrive(self, message: Message, key: int) -> None:
        self._up_flight[message.publisher].pop(key, None)
        kind = topic_kind(message.topic)
        targets = sorted(self._trie.match(message.topic), key=lambda s: (s.client, s.pattern))
        if not targets:
            self.stats.in_flight[kind] -= 1
            self.stats.dropped[kind] += 1
            logger.log(TRACE, "no subscriber for %s", message.topic)
            return
        self.stats.legs[kind] += len(targets) - 1
        self.stats.in_flight[kind] += len(targets) - 1
        for sub in targets:
            leg = Message(message.topic, message.payload, min(message.qos, sub.qos), message.publisher, message.mid)
            session = self._sessions[sub.client]
            if session.connected:
                self._send_downlink(leg, sub)
            else:
                self.stats.in_flight[kind] -= 1
                self._park(session, leg, kind, sub.pattern)

    # Hop 2: subscriber downlink.

    def _send_downlink(self, message: Message, sub: _Subscription) -> None:
        link = self._link(sub.client)
        finish = link.downlink.transmit(self.loop.now, len(message.payload))
        flights = self._down_flight.setdefault(sub.client, {})
        event = self.loop.call_at(
            finish + link.state.latency_s,
            f"deliver {sub.client} {message.topic} {message.mid}",
            lambda: self._deliver(message, sub, event.seq),
        )
        flights[event.seq] = (event, message, sub)

    def _deliver(self, message: Message, sub: _Subscription, key: int) -> None:
        self._down_flight[sub.client].pop(key, None)
        kind = topic_kind(message.topic)
        self.stats.in_flight[kind] -= 1
        self.stats.delivered[kind] += 1
        logger.log(TRACE, "%s <- %s (%d bytes)", sub.client, message.topic, len(message.payload))
        sub.handler(message)

    def _abort_in_flight(self, node: str) -> None:
        """Cancel every hop touching `node`'s link; requeue QoS 1 in persistent mode."""
        session = self._sessions.get(node)
        for event, message in self._up_flight.pop(node, {}).values():
            event.cancel()
            kind = topic_kind(message.topic)
            self.stats.in_flight[kind] -= 1
            if session is not None and self._keeps_qos1(message):
                session.outbox.append(message)
                self.stats.queued[kind] += 1
            else:
                self.stats.dropped[kind] += 1
        for event, message, sub in self._down_flight.pop(node, {}).values():
            event.cancel()
            kind = topic_kind(message.topic)
            self.stats.in_flight[kind] -= 1
            if session is not None:
                self._park(session, message, kind, sub.pattern)
            else:
                self.stats.dropped[kind] += 1

    def _park(self, session: _Session, message: Message, kind: str, pattern: str) -> None:
        if self._keeps_qos1(message) and pattern in session.subscriptions:
            session.pending.append((message, pattern))
            self.stats.queued[kind] += 1
        else:
            self.stats.dropped[kind] += 1

    def _keeps_qos1(self, message: Message) -> bool:
        return message.qos >= 1 and self.session_mode is SessionMode.PERSISTENT

    # Connection state changes.

    def _apply_link(self, node: str, up: bool) -> None:
        link = self._link(node)
        if link.state.up == up:
            return
        link.state.up = up
        if not up:
            link.cut(self.loop.now)
            self._abort_in_flight(node)
            self._disconnect(node)
        elif self._broker.up:
            self._reconnect(node)

    def _apply_broker(self, up: bool) -> None:
        if self._broker.up == up:
            return
        self._broker.up = up
        if not up:
            for node in sorted(self._sessions):
                self._links[node].cut(self.loop.now)
                self._abort_in_flight(node)
                self._disconnect(node)
        else:
            for node in sorted(self._sessions):
                if self._links[node].state.up:
                    self._reconnect(node)

    def _disconnect(self, node: str) -> None:
        session = self._sessions.get(node)
        if session is None or not session.connected:
            return
        session.connected = False
        if self.session_mode is SessionMode.CLEAN:
            self._reset_session(session)
        logger.debug("t=%.3f %s disconnected", self.loop.now, node)
        if session.listener is not None:
            session.listener.on_disconnect()

    def _reset_session(self, session: _Session) -> None:
        for pattern in list(session.subscriptions):
            self._trie.remove(pattern, session.client)
        session.subscriptions.clear()
        dropped = [m for m, _ in session.pending] + list(session.outbox)
        session.pending.clear()
        session.outbox.clear()
        for message in dropped:
            kind = topic_kind(message.topic)
            self.stats.queued[kind] -= 1
            self.stats.dropped[kind] += 1

    def _reconnect(self, node: str) -> None:
        session = self._sessions.get(node)
        if session is None or session.connected:
            return
        session.connected = True
        session_present = self.session_mode is SessionMode.PERSISTENT
        logger.debug("t=%.3f %s reconnected (session_present=%s)", self.loop.now, node, session_present)
        while session.outbox:
            message = session.outbox.popleft()
            kind = topic_kind(message.topic)
            self.stats.queued[kind] -= 1
            self.stats.in_flight[kind] += 1
            self._send_uplink(message)
        while session.pending:
            message, pattern = session.pending.popleft()
            kind = topic_kind(message.topic)
            self.stats.queued[kind] -= 1
            sub = session.subscriptions.get(pattern)
            if sub is None:
                self.stats.dropped[kind] += 1
                continue
            self.stats.in_flight[kind] += 1
            self._send_downlink(message, sub)
        if session.listener is not None:
            session.listener.on_connect(session_present)

