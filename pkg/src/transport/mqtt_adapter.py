"""
Real-broker transport over paho-mqtt.

Each registered node gets its own paho client (client id == node id) running
paho's network thread. Message, connection and timer callbacks from every
client are funnelled into one dispatcher, so handlers of a node never run
concurrently. `serve()` runs the dispatcher on the calling thread.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import paho.mqtt.client as mqtt

from src.config import MQTT_HOST, MQTT_KEEPALIVE, MQTT_PORT
from src.errors import Disconnected
from src.logs import TRACE
from src.transport.base import (
    ConnectionListener,
    Handler,
    Message,
    PublishTicket,
    SessionMode,
    SubscriptionId,
    TimerHandle,
    Transport,
)
from src.transport.topics import TopicTrie, validate_topic

logger = logging.getLogger(__name__)

CONNECT_RETRIES = 5
CONNECT_RETRY_DELAY_S = 2.0


class _Timer(TimerHandle):
    def __init__(self, when: float, callback: Callable[[], None]) -> None:
        self.when = when
        self.callback = callback
        self._cancelled = False

    def cancel(self) -> None:
        self._cancelled = True

    @property
    def cancelled(self) -> bool:
        return self._cancelled


@dataclass(eq=False)
class _Client:
    node: str
    paho: mqtt.Client
    listener: ConnectionListener
    connected: bool = False
    handlers: TopicTrie = field(default_factory=TopicTrie)


class MqttTransport(Transport):
    def __init__(
        self,
        host: str = MQTT_HOST,
        port: int = MQTT_PORT,
        *,
        session_mode: SessionMode = SessionMode.PERSISTENT,
        keepalive: int = MQTT_KEEPALIVE,
        connect_retries: int = CONNECT_RETRIES,
        retry_delay_s: float = CONNECT_RETRY_DELAY_S,
    ) -> None:
        self.host = host
        self.port = port
        self.session_mode = SessionMode(session_mode)
        self.keepalive = keepalive
        self.connect_retries = connect_retries
        self.retry_delay_s = retry_delay_s
        self._clients: Dict[str, _Client] = {}
        self._work: "queue.Queue[Callable[[], None]]" = queue.Queue()
        self._timers: List[Tuple[float, int, _Timer]] = []
        self._timer_lock = threading.Lock()
        self._seq = itertools.count()
        self._epoch = time.monotonic()
        self._mids = itertools.count(1)

    def now(self) -> float:
        return time.monotonic() - self._epoch

    # Connection management.

    def register(self, client: str, listener: ConnectionListener) -> None:
        paho = mqtt.Client(
            mqtt.CallbackAPIVersion.VERSION2,
            client_id=client,
            clean_session=self.session_mode is SessionMode.CLEAN,
        )
        entry = _Client(client, paho, listener)
        paho.on_connect = lambda c, u, flags, rc, props: self._on_connect(entry, flags, rc)
        paho.on_disconnect = lambda c, u, flags, rc, props: self._on_disconnect(entry, rc)
        paho.on_message = lambda c, u, msg: self._on_message(entry, msg)
        paho.reconnect_delay_set(min_delay=1, max_delay=30)
        self._clients[client] = entry
        self._connect(entry)
        paho.loop_start()

    def _connect(self, entry: _Client) -> None:
        for attempt in range(1, self.connect_retries + 1):
            try:
                entry.paho.connect(self.host, self.port, keepalive=self.keepalive)
                return
            except OSError as exc:
                logger.warning(
                    "%s: cannot reach %s:%d (attempt %d/%d): %s",
                    entry.node,
                    self.host,
                    self.port,
                    attempt,
                    self.connect_retries,
                    exc,
                )
                if attempt < self.connect_retries:
                    time.sleep(self.retry_delay_s)
        raise Disconnected(f"broker {self.host}:{self.port} unreachable after {self.connect_retries} attempts")

    def _on_connect(self, entry: _Client, flags, reason_code) -> None:
        if reason_code.is_failure:
            logger.error("%s: connection refused: %s", entry.node, reason_code)
            return
        entry.connected = True
        session_present = bool(getattr(flags, "session_present", False))
        logger.info("%s: connected to %s:%d", entry.node, self.host, self.port)
        self._work.put(lambda: entry.listener.on_connect(session_present))

    def _on_disconnect(self, entry: _Client, reason_code) -> None:
        entry.connected = False
        logger.info("%s: disconnected (%s)", entry.node, reason_code)
        self._work.put(entry.listener.on_disconnect)

    def is_connected(self, client: str) -> bool:
        entry = self._clients.get(client)
        return entry is not None and entry.connected

    def _entry(self, client: str) -> _Client:
        entry = self._clients.get(client)
        if entry is None or not entry.connected:
            raise Disconnected(f"{client} is not connected")
        return entry

    # Publish / subscribe.

    def publish(self, client: str, topic: str, payload: bytes, qos: int = 1) -> PublishTicket:
        validate_topic(topic)
        entry = self._entry(client)
        info = entry.paho.publish(topic, payload, qos=qos)
        if info.rc != mqtt.MQTT_ERR_SUCCESS:
            raise Disconnected(f"{client}: publish to {topic} failed: {mqtt.error_string(info.rc)}")
        logger.log(TRACE, "%s: published %d bytes to %s (mid %d)", client, len(payload), topic, info.mid)
        return PublishTicket(info.mid, topic, qos, len(payload))

    def subscribe(self, client: str, pattern: str, handler: Handler, qos: int = 1) -> SubscriptionId:
        validate_topic(pattern, allow_wildcards=True)
        entry = self._entry(client)
        sub = SubscriptionId(client, pattern)
        entry.handlers.insert(pattern, sub, handler)
        result, _ = entry.paho.subscribe(pattern, qos=qos)
        if result != mqtt.MQTT_ERR_SUCCESS:
            raise Disconnected(f"{client}: subscribe to {pattern} failed: {mqtt.error_string(result)}")
        return sub

    def unsubscribe(self, sub: SubscriptionId) -> None:
        entry = self._clients.get(sub.client)
        if entry is None:
            return
        entry.handlers.remove(sub.pattern, sub)
        if entry.connected:
            entry.paho.unsubscribe(sub.pattern)

    def _on_message(self, entry: _Client, msg: mqtt.MQTTMessage) -> None:
        message = Message(msg.topic, bytes(msg.payload), msg.qos, publisher="", mid=msg.mid or next(self._mids))
        for handler in list(entry.handlers.match(msg.topic)):
            self._work.put(lambda h=handler: h(message))

    # Timers and dispatch.

    def call_later(self, client: str, delay: float, callback: Callable[[], None]) -> TimerHandle:
        timer = _Timer(self.now() + max(0.0, delay), callback)
        with self._timer_lock:
            heapq.heappush(self._timers, (timer.when, next(self._seq), timer))
        # Wake the dispatcher so it recomputes its sleep.
        self._work.put(lambda: None)
        return timer

    def _due_timers(self) -> Tuple[List[_Timer], Optional[float]]:
        due: List[_Timer] = []
        with self._timer_lock:
            now = self.now()
            while self._timers and self._timers[0][0] <= now:
                due.append(heapq.heappop(self._timers)[2])
            head = self._timers[0][0] - now if self._timers else None
        return due, head

    def serve(self, stop: Optional[threading.Event] = None, *, poll_s: float = 0.5) -> None:
        """Run callbacks until `stop` is set (or forever)."""
        stop = stop or threading.Event()
        while not stop.is_set():
            due, wait = self._due_timers()
            for timer in due:
                if not timer.cancelled:
                    self._run(timer.callback)
            timeout = poll_s if wait is None else min(poll_s, max(wait, 0.0))
            try:
                work = self._work.get(timeout=timeout)
            except queue.Empty:
                continue
            self._run(work)

    def _run(self, callback: Callable[[], None]) -> None:
        try:
            callback()
        except Exception:
            logger.exception("callback failed")

    def close(self) -> None:
        for entry in self._clients.values():
            entry.paho.disconnect()
            entry.paho.loop_stop()
        self._clients.clear()
