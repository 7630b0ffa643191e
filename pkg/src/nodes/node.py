"""
Producer, Orchestrator and Hybrid nodes.

A node is a single actor on a transport: it owns its subscriptions, its publish
gate and the sender/receiver roles that implement the transfer protocol. Every
handler of one node runs serially on the transport's executor.

Recovery policies:

- paper-faithful: the orchestrator re-subscribes after a reconnect; producers
  and hybrids stop sending for good once their connection drops.
- resilient: every node re-subscribes when its session was lost, keeps
  publishes made while offline in an outbox, and resumes unfinished transfers
  from its status journal and temp files at startup.
"""

from __future__ import annotations

import enum
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

from src.config import CHUNK_SIZE, DEFAULT_TIMERS, SPILL_THRESHOLD_BYTES, ProtocolTimers
from src.errors import ChunkRelayError, Disconnected, DuplicateActiveTransfer, RequestTimeout
from src.models import StorageEntry
from src.nodes.metrics import MetricsCounters
from src.nodes.receiver import ImageReceiver
from src.nodes.sender import ImageSender
from src.nodes.status import JOURNAL_NAME, FileStatusManager
from src.nodes.storage import ImageStore, safe_segment, selector_matches
from src.protocol.codec import (
    AckMessage,
    CategoryRequest,
    HashId,
    ImageHeader,
    RequestResult,
    SenderId,
    decode_control,
    decode_request,
    encode_request,
    encode_request_result,
)
from src.protocol.fragmentation import MemoryBudget
from src.transport.base import Handler, Message, TimerHandle, Transport
from src.transport.topics import (
    fragment_subscription,
    hash_sender_topic,
    send_header_topic,
    type_request_topic,
)

logger = logging.getLogger(__name__)

ORCHESTRATOR_ID = "orch"


class RecoveryPolicy(str, enum.Enum):
    PAPER_FAITHFUL = "paper-faithful"
    RESILIENT = "resilient"


def node_rng(seed: int, name: str) -> random.Random:
    """Random stream for one node, independent of how many other nodes exist."""
    return random.Random(f"{seed}:{name}")


class Node:
    role = "node"
    halts_when_offline = False

    def __init__(
        self,
        node_id: str,
        transport: Transport,
        work_dir: Path,
        *,
        policy: RecoveryPolicy = RecoveryPolicy.RESILIENT,
        timers: ProtocolTimers = DEFAULT_TIMERS,
        seed: int = 0,
        chunk_size: int = CHUNK_SIZE,
        qos: int = 1,
    ) -> None:
        self.node_id = node_id
        self.sender_id = SenderId(node_id)
        self.transport = transport
        self.work_dir = Path(work_dir)
        self.policy = RecoveryPolicy(policy)
        self.timers = timers
        self.seed = seed
        self.chunk_size = chunk_size
        self.qos = qos
        self.metrics = MetricsCounters()
        self.rng = node_rng(seed, node_id)
        self.halted = False
        self._subscriptions: List[Tuple[str, Handler]] = []
        self._subscribed = False
        self._outbox: Deque[Tuple[str, bytes]] = deque()

    @property
    def resilient(self) -> bool:
        return self.policy is RecoveryPolicy.RESILIENT

    @property
    def connected(self) -> bool:
        return self.transport.is_connected(self.node_id)

    def start(self) -> None:
        self.transport.register(self.node_id, self)
        self._subscribe_all()
        self._on_start()

    def _on_start(self) -> None:
        pass

    def add_subscription(self, pattern: str, handler: Handler) -> None:
        self._subscriptions.append((pattern, handler))
        if self.connected:
            self.transport.subscribe(self.node_id, pattern, self._guard(handler), self.qos)

    def _subscribe_all(self) -> None:
        for pattern, handler in self._subscriptions:
            try:
                self.transport.subscribe(self.node_id, pattern, self._guard(handler), self.qos)
            except Disconnected:
                logger.debug("%s: offline, subscriptions deferred", self.node_id)
                return
        self._subscribed = True

    def _guard(self, handler: Handler) -> Handler:
        def guarded(message: Message) -> None:
            try:
                handler(message)
            except ChunkRelayError as exc:
                self.metrics.malformed_messages += 1
                logger.warning("%s: dropped message on %s: %s", self.node_id, message.topic, exc)

        return guarded

    def publish(self, topic: str, payload: bytes) -> bool:
        """Publish, park in the offline outbox, or refuse; False means the message is gone."""
        if self.halted:
            return False
        if self.connected:
            try:
                self.transport.publish(self.node_id, topic, payload, self.qos)
                self.metrics.bytes_on_wire += len(payload)
                return True
            except Disconnected:
                pass
        if self.resilient:
            self._outbox.append((topic, payload))
            return True
        logger.debug("%s: offline, dropping publish to %s", self.node_id, topic)
        return False

    def _flush_outbox(self) -> None:
        while self._outbox and self.connected:
            topic, payload = self._outbox.popleft()
            try:
                self.transport.publish(self.node_id, topic, payload, self.qos)
            except Disconnected:
                self._outbox.appendleft((topic, payload))
                return
            self.metrics.bytes_on_wire += len(payload)

    def withdraw(self, topic: str, payload: bytes) -> bool:
        """Drop a publish still parked in the outbox; False once it has left the node."""
        try:
            self._outbox.remove((topic, payload))
        except ValueError:
            return False
        return True

    # Connection callbacks.

    def on_connect(self, session_present: bool) -> None:
        if self.halted:
            return
        logger.info("%s: reconnected (session_present=%s)", self.node_id, session_present)
        # A broker-side session does not restore handlers of a fresh process.
        if not session_present or not self._subscribed:
            self._subscribe_all()
        self._flush_outbox()

    def on_disconnect(self) -> None:
        logger.info("%s: connection lost", self.node_id)
        if not self.resilient and self.halts_when_offline:
            self.halt()

    def halt(self) -> None:
        self.halted = True

    def close(self) -> None:
        """Release files and database handles; the node must not be used afterwards."""

    @property
    def idle(self) -> bool:
        return True


class ProducerNode(Node):
    role = "producer"
    halts_when_offline = True

    def __init__(self, node_id: str, transport: Transport, work_dir: Path, *, orchestrator: str = ORCHESTRATOR_ID, **kwargs) -> None:
        super().__init__(node_id, transport, work_dir, **kwargs)
        self.orchestrator = orchestrator
        self.status = FileStatusManager(self.work_dir / JOURNAL_NAME, replay=self.resilient)
        self.sender = ImageSender(
            node_id,
            self.sender_id,
            orchestrator,
            transport,
            self.publish,
            status=self.status,
            metrics=self.metrics,
            temp_root=self.work_dir / "tmp",
            rng=self.rng,
            timers=self.timers,
            chunk_size=self.chunk_size,
            resilient=self.resilient,
        )
        self.sender.on_idle = self._next_round
        self._rounds: Deque[Tuple[List[Path], str]] = deque()
        self.add_subscription(hash_sender_topic(node_id), self._on_control)

    def _on_start(self) -> None:
        if self.resilient:
            self.sender.resume()

    def begin_transfer(
        self, image: bytes, package_name: str, file_name: str, annotations: Optional[Dict[str, str]] = None
    ) -> HashId:
        return self.sender.begin_transfer(image, package_name, file_name, annotations)

    def queue_package(self, files: Sequence[Path], package_name: str, *, rounds: int = 1) -> None:
        """Send every file of a package, `rounds` times over; each round starts when the previous drains."""
        for _ in range(rounds):
            self._rounds.append((list(files), package_name))
        if self.sender.idle:
            self._next_round()

    def _next_round(self) -> None:
        if not self._rounds or self.halted:
            return
        files, package_name = self._rounds.popleft()
        for path in files:
            try:
                self.begin_transfer(Path(path).read_bytes(), package_name, Path(path).name)
            except DuplicateActiveTransfer:
                logger.debug("%s: %s is already queued", self.node_id, path)

    def _on_control(self, message: Message) -> None:
        control = decode_control(message.payload)
        if isinstance(control, AckMessage):
            self.sender.on_ack(control)
        else:
            self._on_request_result(control)

    def _on_request_result(self, result: RequestResult) -> None:
        self.metrics.protocol_violations += 1
        logger.debug("%s: unexpected request result for %r", self.node_id, result.package_selector)

    def halt(self) -> None:
        if self.halted:
            return
        super().halt()
        self._rounds.clear()
        self.sender.halt()

    @property
    def idle(self) -> bool:
        return self.sender.idle and not self._rounds


class _ReceivingMixin:
    """Storage plus an ImageReceiver listening on this node's namespace."""

    def _init_receiver(self, storage_limit_bytes: Optional[int], spill_threshold_bytes: int, database_url: Optional[str]) -> None:
        self.store = ImageStore(self.work_dir / "storage", database_url=database_url, limit_bytes=storage_limit_bytes)
        self.receiver = ImageReceiver(
            self.node_id,
            self.transport,
            self.publish,
            store=self.store,
            metrics=self.metrics,
            budget=MemoryBudget(spill_threshold_bytes),
            spill_dir=self.work_dir / "spill",
            timers=self.timers,
        )
        self.add_subscription(send_header_topic(self.node_id), self.receiver.on_header)
        self.add_subscription(fragment_subscription(self.node_id), self.receiver.on_fragment)

    def close(self) -> None:
        for assembly in self.receiver.assemblies:
            assembly.buffer.discard()
        self.store.close()
        super().close()


class OrchestratorNode(_ReceivingMixin, Node):
    role = "orchestrator"

    def __init__(
        self,
        node_id: str,
        transport: Transport,
        work_dir: Path,
        *,
        storage_limit_bytes: Optional[int] = None,
        spill_threshold_bytes: int = SPILL_THRESHOLD_BYTES,
        database_url: Optional[str] = None,
        **kwargs,
    ) -> None:
        super().__init__(node_id, transport, work_dir, **kwargs)
        self._init_receiver(storage_limit_bytes, spill_threshold_bytes, database_url)
        self._serving: Dict[str, ImageSender] = {}
        self.add_subscription(type_request_topic(node_id), self.on_type_request)

    def serving_id(self, requester: str) -> SenderId:
        """Sender identity used when serving `requester`; acks come back on its hash_sender topic."""
        return SenderId(f"{self.node_id}.{requester}")

    def _serving_dir(self, requester: str) -> Path:
        return self.work_dir / "serving" / safe_segment(requester)

    def _serving_sender(self, requester: str) -> ImageSender:
        sender = self._serving.get(requester)
        if sender is not None:
            return sender
        serving_id = self.serving_id(requester)
        directory = self._serving_dir(requester)
        sender = ImageSender(
            self.node_id,
            serving_id,
            requester,
            self.transport,
            self.publish,
            status=FileStatusManager(directory / JOURNAL_NAME, replay=self.resilient),
            metrics=self.metrics,
            temp_root=directory / "tmp",
            rng=node_rng(self.seed, serving_id.value),
            timers=self.timers,
            chunk_size=self.chunk_size,
            resilient=self.resilient,
        )
        self._serving[requester] = sender
        self.add_subscription(hash_sender_topic(serving_id.value), self._serving_control(sender))
        return sender

    def _serving_control(self, sender: ImageSender) -> Handler:
        def handle(message: Message) -> None:
            control = decode_control(message.payload)
            if isinstance(control, AckMessage):
                sender.on_ack(control)
            else:
                self.metrics.protocol_violations += 1

        return handle

    def _on_start(self) -> None:
        serving_root = self.work_dir / "serving"
        if not self.resilient or not serving_root.is_dir():
            return
        for directory in sorted(p for p in serving_root.iterdir() if p.is_dir()):
            self._serving_sender(directory.name).resume()

    def on_type_request(self, message: Message) -> None:
        """
        Answer with the match count, then send every matching stored image to the requester.

        Images stored under several senders are served once; the count is the
        number of distinct hashes the requester will receive.
        """
        request = decode_request(message.payload)
        requester = request.requester.value
        entries: Dict[str, StorageEntry] = {}
        for entry in self.store.entries(request.package_selector):
            if entry.hash_file not in entries and self.store.verify(entry):
                entries[entry.hash_file] = entry
        logger.info("%s: %s requested %r, %d match(es)", self.node_id, requester, request.package_selector, len(entries))
        sender = self._serving_sender(requester)
        self.publish(
            hash_sender_topic(requester),
            encode_request_result(RequestResult(request.package_selector, len(entries))),
        )
        for entry in entries.values():
            try:
                sender.begin_transfer(
                    self.store.read(entry),
                    entry.package_name,
                    entry.file_name,
                    {"origin": entry.sender},
                )
            except DuplicateActiveTransfer:
                # Still counted: the transfer already in flight delivers it.
                logger.debug("%s: %s already being served to %s", self.node_id, entry.file_name, requester)

    @property
    def serving(self) -> Dict[str, ImageSender]:
        return dict(self._serving)

    @property
    def idle(self) -> bool:
        return not self.receiver.assemblies and all(s.idle for s in self._serving.values())


@dataclass(eq=False)
class RetrievalRequest:
    selector: str
    issued_s: float
    expected: Optional[int] = None
    entries: List[StorageEntry] = field(default_factory=list)
    paths: List[Path] = field(default_factory=list)
    completed_s: Optional[float] = None
    timed_out: bool = False
    timer: Optional[TimerHandle] = None
    wire: Optional[Tuple[str, bytes]] = None

    @property
    def done(self) -> bool:
        return self.expected is not None and len(self.entries) >= self.expected

    def result(self) -> List[Path]:
        if self.timed_out:
            raise RequestTimeout(f"no answer to request {self.selector!r}")
        return list(self.paths)


class HybridNode(_ReceivingMixin, ProducerNode):
    role = "hybrid"

    def __init__(
        self,
        node_id: str,
        transport: Transport,
        work_dir: Path,
        *,
        storage_limit_bytes: Optional[int] = None,
        spill_threshold_bytes: int = SPILL_THRESHOLD_BYTES,
        database_url: Optional[str] = None,
        **kwargs,
    ) -> None:
        super().__init__(node_id, transport, work_dir, **kwargs)
        self._init_receiver(storage_limit_bytes, spill_threshold_bytes, database_url)
        self.receiver.on_restored = self._on_restored
        self.requests: List[RetrievalRequest] = []
        self.on_request_done: Optional[Callable[[RetrievalRequest], None]] = None

    def request(self, selector: str) -> RetrievalRequest:
        """Ask the orchestrator for a package; restored images accumulate on the returned request."""
        request = RetrievalRequest(selector, issued_s=self.transport.now())
        self.requests.append(request)
        request.wire = (type_request_topic(self.orchestrator), encode_request(CategoryRequest(self.sender_id, selector)))
        self.publish(*request.wire)
        request.timer = self.transport.call_later(
            self.node_id, self.timers.request_timeout_s, lambda: self._on_request_timeout(request)
        )
        return request

    def _open_requests(self) -> List[RetrievalRequest]:
        return [r for r in self.requests if not r.timed_out and r.completed_s is None]

    def _on_request_result(self, result: RequestResult) -> None:
        for request in self._open_requests():
            if request.selector == result.package_selector and request.expected is None:
                request.expected = result.count
                if request.timer is not None:
                    request.timer.cancel()
                    request.timer = None
                logger.info("%s: %r will return %d image(s)", self.node_id, request.selector, result.count)
                self._check_done(request)
                return
        self.metrics.protocol_violations += 1

    def _on_restored(self, header: ImageHeader, entry: StorageEntry) -> None:
        for request in self._open_requests():
            if not selector_matches(header.package_name, request.selector):
                continue
            if any(seen.id == entry.id for seen in request.entries):
                continue
            request.entries.append(entry)
            request.paths.append(self.store.path_of(entry))
            self._check_done(request)

    def _check_done(self, request: RetrievalRequest) -> None:
        if request.done and request.completed_s is None:
            request.completed_s = self.transport.now()
            if self.on_request_done is not None:
                self.on_request_done(request)

    def _on_request_timeout(self, request: RetrievalRequest) -> None:
        request.timer = None
        if request.expected is None:
            request.timed_out = True
            logger.warning("%s: request %r timed out", self.node_id, request.selector)
            # A request that never left the node must not be served after the fact.
            if request.wire is not None and self.withdraw(*request.wire):
                logger.debug("%s: withdrew unsent request %r", self.node_id, request.selector)

    @property
    def idle(self) -> bool:
        return self.sender.idle and not self._rounds and not self.receiver.assemblies
