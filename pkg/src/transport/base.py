"""
Transport interface shared by the simulated broker and the real MQTT adapter.

Implementations may deliver concurrently across nodes but must serialize every
handler and timer callback of one node.
"""

from __future__ import annotations

import enum
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Protocol

BROKER_ID = "broker"


class SessionMode(str, enum.Enum):
    CLEAN = "clean"
    PERSISTENT = "persistent"


@dataclass(frozen=True)
class Message:
    topic: str
    payload: bytes
    qos: int
    publisher: str
    mid: int


@dataclass(frozen=True)
class PublishTicket:
    mid: int
    topic: str
    qos: int
    size: int


@dataclass(frozen=True)
class SubscriptionId:
    client: str
    pattern: str


Handler = Callable[[Message], None]


class ConnectionListener(Protocol):
    def on_connect(self, session_present: bool) -> None: ...

    def on_disconnect(self) -> None: ...


class TimerHandle(ABC):
    @abstractmethod
    def cancel(self) -> None: ...

    @property
    @abstractmethod
    def cancelled(self) -> bool: ...


class Transport(ABC):
    session_mode: SessionMode

    @abstractmethod
    def now(self) -> float:
        """Current time in seconds (simulated or wall)."""

    @abstractmethod
    def register(self, client: str, listener: ConnectionListener) -> None:
        """Attach a node and its connection callbacks."""

    @abstractmethod
    def is_connected(self, client: str) -> bool: ...

    @abstractmethod
    def publish(self, client: str, topic: str, payload: bytes, qos: int = 1) -> PublishTicket:
        """Raises Disconnected when the client is not connected."""

    @abstractmethod
    def subscribe(self, client: str, pattern: str, handler: Handler, qos: int = 1) -> SubscriptionId:
        """Raises Disconnected when the client is not connected."""

    @abstractmethod
    def unsubscribe(self, sub: SubscriptionId) -> None: ...

    @abstractmethod
    def call_later(self, client: str, delay: float, callback: Callable[[], None]) -> TimerHandle:
        """Run `callback` on the client's serial executor after `delay` seconds."""
