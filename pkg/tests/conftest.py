import heapq
import itertools
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.errors import Disconnected  # noqa: E402
from src.transport.base import (  # noqa: E402
    ConnectionListener,
    Handler,
    Message,
    PublishTicket,
    SubscriptionId,
    TimerHandle,
    Transport,
)
from src.transport.topics import topic_kind, topic_matches  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-size scenarios")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size scenario runs (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


class ManualTimer(TimerHandle):
    def __init__(self, when: float, callback: Callable[[], None]) -> None:
        self.when = when
        self.callback = callback
        self._cancelled = False

    def cancel(self) -> None:
        self._cancelled = True

    @property
    def cancelled(self) -> bool:
        return self._cancelled


class ManualTransport(Transport):
    """Transport with a hand-driven clock; publishes are recorded, never delivered."""

    def __init__(self) -> None:
        self.clock = 0.0
        self.published: List[Message] = []
        self.online: Dict[str, bool] = {}
        self.listeners: Dict[str, ConnectionListener] = {}
        self.handlers: Dict[Tuple[str, str], Handler] = {}
        self._timers: List[Tuple[float, int, ManualTimer]] = []
        self._seq = itertools.count()

    def now(self) -> float:
        return self.clock

    def register(self, client: str, listener: ConnectionListener) -> None:
        self.online[client] = True
        self.listeners[client] = listener

    def is_connected(self, client: str) -> bool:
        return self.online.get(client, False)

    def publish(self, client: str, topic: str, payload: bytes, qos: int = 1) -> PublishTicket:
        if not self.is_connected(client):
            raise Disconnected(f"{client} offline")
        message = Message(topic, bytes(payload), qos, client, len(self.published) + 1)
        self.published.append(message)
        return PublishTicket(message.mid, topic, qos, len(payload))

    def subscribe(self, client: str, pattern: str, handler: Handler, qos: int = 1) -> SubscriptionId:
        if not self.is_connected(client):
            raise Disconnected(f"{client} offline")
        self.handlers[(client, pattern)] = handler
        return SubscriptionId(client, pattern)

    def unsubscribe(self, sub: SubscriptionId) -> None:
        self.handlers.pop((sub.client, sub.pattern), None)

    def call_later(self, client: str, delay: float, callback: Callable[[], None]) -> TimerHandle:
        timer = ManualTimer(self.clock + max(0.0, delay), callback)
        heapq.heappush(self._timers, (timer.when, next(self._seq), timer))
        return timer

    # Test helpers.

    def advance(self, seconds: float) -> None:
        target = self.clock + seconds
        while self._timers and self._timers[0][0] <= target:
            when, _, timer = heapq.heappop(self._timers)
            self.clock = when
            if not timer.cancelled:
                timer.callback()
        self.clock = target

    def deliver(self, topic: str, payload: bytes, publisher: str = "peer") -> None:
        message = Message(topic, bytes(payload), 1, publisher, 0)
        for (_, pattern), handler in list(self.handlers.items()):
            if topic_matches(pattern, topic):
                handler(message)

    def take(self, kind: Optional[str] = None) -> List[Message]:
        """Pop recorded publishes, optionally only one stream (send_header, hash_sender, ...)."""
        taken = [m for m in self.published if kind is None or topic_kind(m.topic) == kind]
        self.published = [m for m in self.published if m not in taken]
        return taken


@pytest.fixture
def manual() -> ManualTransport:
    return ManualTransport()


@pytest.fixture
def write_scenario(tmp_path):
    """Write a TOML scenario under tmp_path and return its path."""

    def write(text: str, name: str = "scenario.toml") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return write
