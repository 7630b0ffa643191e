import socket
import threading

import paho.mqtt.client as mqtt
import pytest

from src.errors import Disconnected
from src.transport.mqtt_adapter import MqttTransport, _Client


class Listener:
    def on_connect(self, session_present):
        pass

    def on_disconnect(self):
        pass


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def test_timers_fire_in_order_on_the_dispatcher():
    transport = MqttTransport()
    seen = []
    stop = threading.Event()
    transport.call_later("n", 0.02, lambda: seen.append("b"))
    cancelled = transport.call_later("n", 0.01, lambda: seen.append("x"))
    transport.call_later("n", 0.0, lambda: seen.append("a"))
    cancelled.cancel()
    transport.call_later("n", 0.05, stop.set)
    transport.serve(stop, poll_s=0.01)
    assert seen == ["a", "b"]


def test_failing_callback_does_not_stop_dispatch():
    transport = MqttTransport()
    stop = threading.Event()
    transport.call_later("n", 0.0, lambda: 1 / 0)
    transport.call_later("n", 0.01, stop.set)
    transport.serve(stop, poll_s=0.01)
    assert stop.is_set()


def test_incoming_messages_are_queued_for_matching_handlers():
    transport = MqttTransport()
    entry = _Client("orch", mqtt.Client(mqtt.CallbackAPIVersion.VERSION2, client_id="orch"), Listener())
    seen = []
    entry.handlers.insert("net/orch/hash_sender_orq/+", "fragments", seen.append)
    entry.handlers.insert("net/orch/send_header", "headers", seen.append)

    msg = mqtt.MQTTMessage(topic=b"net/orch/hash_sender_orq/PC1")
    msg.payload = b"frag"
    msg.qos = 1
    transport._on_message(entry, msg)
    assert seen == []
    transport._work.get_nowait()()
    (message,) = seen
    assert message.topic == "net/orch/hash_sender_orq/PC1"
    assert message.payload == b"frag"
    assert transport._work.empty()


def test_publish_without_connection_raises():
    transport = MqttTransport()
    assert not transport.is_connected("PC1")
    with pytest.raises(Disconnected):
        transport.publish("PC1", "net/orch/send_header", b"{}")
    with pytest.raises(Disconnected):
        transport.subscribe("PC1", "net/PC1/hash_sender", print)


def test_unreachable_broker_raises_after_retries():
    transport = MqttTransport("127.0.0.1", _free_port(), connect_retries=2, retry_delay_s=0.0)
    with pytest.raises(Disconnected, match="after 2 attempts"):
        transport.register("PC1", Listener())
    transport.close()
