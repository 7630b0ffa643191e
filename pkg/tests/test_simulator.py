from typing import List

import pytest
from hypothesis import given, settings, strategies as st

from src.errors import Disconnected, InvariantViolation
from src.transport.base import BROKER_ID, SessionMode
from src.transport.simulator import EventLoop, SimBroker


class Listener:
    def __init__(self) -> None:
        self.events: List[str] = []

    def on_connect(self, session_present: bool) -> None:
        self.events.append(f"connect {session_present}")

    def on_disconnect(self) -> None:
        self.events.append("disconnect")


def _pair(mode=SessionMode.PERSISTENT, a_bps=None):
    broker = SimBroker(session_mode=mode)
    if a_bps is not None:
        broker.add_link("a", a_bps)
    listeners = {"a": Listener(), "b": Listener()}
    for name, listener in listeners.items():
        broker.register(name, listener)
    inbox = []
    broker.subscribe("b", "net/b/#", lambda m: inbox.append((broker.now(), m)))
    return broker, listeners, inbox


def test_event_loop_orders_by_time_then_insertion():
    loop = EventLoop()
    seen = []
    loop.call_at(2.0, "late", lambda: seen.append("late"))
    loop.call_at(1.0, "first", lambda: seen.append("first"))
    loop.call_at(1.0, "second", lambda: seen.append("second"))
    cancelled = loop.call_at(1.5, "never", lambda: seen.append("never"))
    cancelled.cancel()
    loop.run_until(10.0)
    assert seen == ["first", "second", "late"]
    assert loop.now == 10.0
    with pytest.raises(InvariantViolation):
        loop.call_at(5.0, "past", lambda: None)


def test_message_takes_two_hops():
    broker, _, inbox = _pair()
    broker.publish("a", "net/b/send_header", b"x" * 1000)
    broker.run_to_quiescence()
    # uplink tick + 1 ms latency, then downlink tick + 1 ms latency
    assert len(inbox) == 1
    at, message = inbox[0]
    assert at == pytest.approx(0.004)
    assert message.publisher == "a"
    assert broker.stats.delivered["send_header"] == 1
    assert broker.stats.balanced()


def test_per_publisher_order_is_fifo():
    broker, _, inbox = _pair()
    for i in range(20):
        broker.publish("a", "net/b/hash_sender_orq/a", bytes([i]) * (1000 - 40 * i))
    broker.run_to_quiescence()
    assert [m.payload[0] for _, m in inbox] == list(range(20))


def test_unmatched_publish_is_dropped():
    broker, _, inbox = _pair()
    broker.publish("a", "net/nobody/send_header", b"x")
    broker.run_to_quiescence()
    assert inbox == []
    assert broker.stats.dropped["send_header"] == 1
    assert broker.stats.balanced()


def test_publish_while_offline_raises():
    broker, _, _ = _pair()
    broker.set_link("a", False)
    broker.run_until(0.0)
    assert not broker.is_connected("a")
    with pytest.raises(Disconnected):
        broker.publish("a", "net/b/send_header", b"x")


@pytest.mark.parametrize("mode, delivered", [(SessionMode.PERSISTENT, 1), (SessionMode.CLEAN, 0)])
def test_publisher_fault_mid_flight(mode, delivered):
    broker, listeners, inbox = _pair(mode, a_bps=8e3)
    broker.publish("a", "net/b/send_header", b"x" * 1000)  # one second on the wire
    broker.set_link("a", False, at=0.5)
    broker.set_link("a", True, at=2.0)
    broker.run_to_quiescence()
    assert len(inbox) == delivered
    if delivered:
        assert inbox[0][0] > 2.0
    assert listeners["a"].events == ["disconnect", f"connect {mode is SessionMode.PERSISTENT}"]
    assert broker.stats.balanced()
    assert broker.stats.queued["send_header"] == 0


def test_persistent_session_queues_for_offline_subscriber():
    broker, listeners, inbox = _pair()
    broker.set_link("b", False, at=0.0)
    broker.loop.call_at(1.0, "pub", lambda: broker.publish("a", "net/b/send_header", b"hello"))
    broker.loop.call_at(1.0, "pub0", lambda: broker.publish("a", "net/b/send_header", b"qos0", qos=0))
    broker.set_link("b", True, at=5.0)
    broker.run_to_quiescence()
    assert [m.payload for _, m in inbox] == [b"hello"]
    assert inbox[0][0] > 5.0
    assert listeners["b"].events == ["disconnect", "connect True"]
    assert broker.stats.dropped["send_header"] == 1
    assert broker.stats.balanced()


def test_clean_session_forgets_subscriptions():
    broker, listeners, inbox = _pair(SessionMode.CLEAN)
    broker.set_link("b", False, at=0.0)
    broker.set_link("b", True, at=1.0)
    broker.loop.call_at(2.0, "pub", lambda: broker.publish("a", "net/b/send_header", b"hello"))
    broker.run_to_quiescence()
    assert inbox == []
    assert listeners["b"].events == ["disconnect", "connect False"]


def test_broker_outage_disconnects_everyone():
    broker, listeners, _ = _pair()
    broker.set_link(BROKER_ID, False, at=1.0)
    broker.set_link(BROKER_ID, True, at=2.0)
    broker.run_until(1.5)
    assert not broker.broker_up
    assert not broker.is_connected("a") and not broker.is_connected("b")
    broker.run_to_quiescence()
    assert broker.is_connected("a") and broker.is_connected("b")
    assert listeners["a"].events == ["disconnect", "connect True"]


def _scripted_run():
    broker, _, inbox = _pair(a_bps=1e6)
    for i in range(10):
        broker.loop.call_at(i * 0.01, f"pub {i}", lambda i=i: broker.publish("a", "net/b/send_header", bytes(500 + i)))
    broker.set_link("b", False, at=0.02)
    broker.set_link("b", True, at=0.5)
    broker.run_to_quiescence()
    return broker.trace_digest(), [(t, m.mid) for t, m in inbox]


def test_same_script_same_trace():
    assert _scripted_run() == _scripted_run()


@settings(max_examples=40, deadline=None)
@given(
    publishes=st.lists(
        st.tuples(st.floats(min_value=0.0, max_value=2.0), st.integers(min_value=1, max_value=4000), st.sampled_from([0, 1])),
        min_size=1,
        max_size=25,
    ),
    down=st.floats(min_value=0.0, max_value=2.0),
    outage=st.floats(min_value=0.001, max_value=2.0),
    mode=st.sampled_from(list(SessionMode)),
    faulty=st.sampled_from(["b", BROKER_ID]),
)
def test_every_leg_is_accounted_for(publishes, down, outage, mode, faulty):
    broker, _, inbox = _pair(mode, a_bps=1e6)

    def publish(size, qos):
        if broker.is_connected("a"):
            broker.publish("a", "net/b/hash_sender_orq/a", bytes(size), qos=qos)

    for t, size, qos in publishes:
        broker.loop.call_at(t, "pub", lambda size=size, qos=qos: publish(size, qos))
    broker.set_link(faulty, False, at=down)
    broker.set_link(faulty, True, at=down + outage)
    while broker.loop.next_time() is not None:
        broker.run_until(broker.loop.next_time())
        assert broker.stats.balanced()
    stats = broker.stats
    kind = "hash_sender_orq"
    assert stats.queued[kind] == 0 and stats.in_flight[kind] == 0
    assert stats.delivered[kind] + stats.dropped[kind] == stats.legs[kind]
    assert stats.delivered[kind] == len(inbox)
