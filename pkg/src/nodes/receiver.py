"""
Image Receiver: accepts headers, assembles fragments, restores and stores images.

A watchdog per assembly asks the sender for absent parts whenever a period
passes without progress, and abandons the assembly after a bounded number of
stalled rounds. Rounds only count while the node is connected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from src.config import DEFAULT_TIMERS, ProtocolTimers
from src.errors import ChunkRelayError, ForeignFragment, HashMismatch, IoFailure, StorageFull
from src.models import StorageEntry
from src.nodes.metrics import MetricsCounters
from src.nodes.storage import ImageStore, safe_segment
from src.protocol.codec import (
    AckKind,
    AckMessage,
    HashId,
    ImageHeader,
    SenderId,
    decode_fragment,
    decode_header,
    encode_ack,
    peek_header_identity,
)
from src.protocol.fragmentation import AssemblyBuffer, IngestResult, MemoryBudget, ingest_fragment, restore
from src.transport.base import Message, TimerHandle, Transport
from src.transport.topics import fragment_sender, hash_sender_topic

logger = logging.getLogger(__name__)

AssemblyKey = Tuple[HashId, SenderId]
PublishFn = Callable[[str, bytes], bool]


@dataclass(eq=False)
class Assembly:
    buffer: AssemblyBuffer
    started_s: float
    last_popcount: int = 0
    stalled_rounds: int = 0
    timer: Optional[TimerHandle] = None

    @property
    def header(self) -> ImageHeader:
        return self.buffer.header


class ImageReceiver:
    def __init__(
        self,
        client: str,
        transport: Transport,
        publish: PublishFn,
        *,
        store: ImageStore,
        metrics: MetricsCounters,
        budget: MemoryBudget,
        spill_dir: Path,
        timers: ProtocolTimers = DEFAULT_TIMERS,
    ) -> None:
        self.client = client
        self.transport = transport
        self.store = store
        self.metrics = metrics
        self.budget = budget
        self.spill_dir = Path(spill_dir)
        self.timers = timers
        # Fires for every completed image, including headers for images already stored.
        self.on_restored: Optional[Callable[[ImageHeader, StorageEntry], None]] = None
        self._publish = publish
        self._assemblies: Dict[AssemblyKey, Assembly] = {}

    @property
    def assemblies(self) -> List[Assembly]:
        return list(self._assemblies.values())

    def _reserved_bytes(self) -> int:
        return sum(a.header.file_size for a in self._assemblies.values())

    def _reply(self, sender: SenderId, hash_file: HashId, kind: AckKind, missing: Tuple[int, ...] = ()) -> None:
        self._publish(hash_sender_topic(sender.value), encode_ack(AckMessage(hash_file, kind, missing)))

    # Headers.

    def on_header(self, message: Message) -> None:
        self.metrics.files_received += 1
        try:
            header = decode_header(message.payload)
        except ChunkRelayError as exc:
            self.metrics.malformed_messages += 1
            identity = peek_header_identity(message.payload)
            logger.warning("%s: invalid header on %s: %s", self.client, message.topic, exc)
            if identity is not None:
                self._reply(identity[1], identity[0], AckKind.REJECTED)
            return

        key = (header.hash_file, header.sender)
        existing = self.store.find(*key)
        if existing is not None:
            self.metrics.duplicates_received += 1
            self._reply(header.sender, header.hash_file, AckKind.COMPLETED)
            if self.on_restored is not None:
                self.on_restored(header, existing)
            return
        if key in self._assemblies:
            self.metrics.duplicates_received += 1
            self._reply(header.sender, header.hash_file, AckKind.ACCEPTED)
            return
        if not self.store.has_room(header.file_size, self._reserved_bytes()):
            logger.warning(
                "%s: rejecting %s from %s (%d bytes): storage limit reached",
                self.client,
                header.hash_file.short,
                header.sender,
                header.file_size,
            )
            self._reply(header.sender, header.hash_file, AckKind.REJECTED)
            return

        buffer = AssemblyBuffer(header, budget=self.budget, spill_dir=self.spill_dir / safe_segment(header.sender.value))
        assembly = Assembly(buffer, started_s=self.transport.now())
        self._assemblies[key] = assembly
        self._arm_watchdog(key, assembly)
        logger.debug("%s: accepted %s from %s (%d parts)", self.client, header.hash_file.short, header.sender, header.total_parts)
        self._reply(header.sender, header.hash_file, AckKind.ACCEPTED)

    # Fragments.

    def on_fragment(self, message: Message) -> None:
        self.metrics.files_received += 1
        try:
            _, sender_text = fragment_sender(message.topic)
            sender = SenderId(sender_text)
            fragment = decode_fragment(message.payload)
        except ChunkRelayError as exc:
            self.metrics.malformed_messages += 1
            logger.debug("%s: dropping fragment on %s: %s", self.client, message.topic, exc)
            return

        key = (fragment.hash_file, sender)
        assembly = self._assemblies.get(key)
        if assembly is None:
            self.metrics.unknown_fragments += 1
            logger.debug("%s: part %d of unknown transfer %s from %s", self.client, fragment.part_index, fragment.hash_file.short, sender)
            return
        try:
            result = ingest_fragment(assembly.buffer, fragment)
        except ForeignFragment:
            self.metrics.unknown_fragments += 1
            return
        except ChunkRelayError as exc:
            self.metrics.malformed_messages += 1
            logger.debug("%s: %s", self.client, exc)
            return

        if result is IngestResult.DUPLICATE:
            self.metrics.duplicates_received += 1
            return
        if result is IngestResult.MISMATCH:
            self.metrics.mismatched_fragments += 1
            return
        if assembly.buffer.complete:
            self._finish(key, assembly)

    def _finish(self, key: AssemblyKey, assembly: Assembly) -> None:
        header = assembly.header
        try:
            image = restore(assembly.buffer)
        except HashMismatch as exc:
            self.metrics.hash_mismatches += 1
            logger.warning("%s: %s; requesting every part again", self.client, exc)
            assembly.buffer.discard()
            assembly.last_popcount = 0
            assembly.stalled_rounds = 0
            self.metrics.retransmission_requests += 1
            self._reply(header.sender, header.hash_file, AckKind.MISSING_PARTS, tuple(range(header.total_parts)))
            return

        try:
            entry = self.store.store(image, header, stored_at=self.transport.now())
        except (StorageFull, IoFailure) as exc:
            logger.error("%s: cannot store %s from %s: %s", self.client, header.hash_file.short, header.sender, exc)
            self._drop(key)
            self.metrics.assemblies_abandoned += 1
            self._reply(header.sender, header.hash_file, AckKind.REJECTED)
            return

        self._drop(key)
        self.metrics.note_restored(header.hash_file.hex, header.sender.value, self.transport.now())
        self._reply(header.sender, header.hash_file, AckKind.COMPLETED)
        if self.on_restored is not None:
            self.on_restored(header, entry)

    def _drop(self, key: AssemblyKey) -> None:
        assembly = self._assemblies.pop(key, None)
        if assembly is None:
            return
        if assembly.timer is not None:
            assembly.timer.cancel()
        assembly.buffer.discard()

    # Watchdog.

    def _arm_watchdog(self, key: AssemblyKey, assembly: Assembly) -> None:
        assembly.timer = self.transport.call_later(self.client, self.timers.watchdog_s, lambda: self.watchdog(key))

    def watchdog(self, key: AssemblyKey) -> None:
        assembly = self._assemblies.get(key)
        if assembly is None:
            return
        assembly.timer = None
        if not self.transport.is_connected(self.client):
            self._arm_watchdog(key, assembly)
            return
        buffer = assembly.buffer
        if buffer.popcount != assembly.last_popcount:
            assembly.last_popcount = buffer.popcount
            assembly.stalled_rounds = 0
            self._arm_watchdog(key, assembly)
            return
        header = assembly.header
        if assembly.stalled_rounds >= self.timers.max_assembly_rounds:
            logger.info(
                "%s: giving up on %s from %s with %d/%d parts",
                self.client,
                header.hash_file.short,
                header.sender,
                buffer.popcount,
                header.total_parts,
            )
            self._drop(key)
            self.metrics.assemblies_abandoned += 1
            return
        assembly.stalled_rounds += 1
        missing = buffer.missing()
        self.metrics.retransmission_requests += 1
        logger.debug("%s: %s stalled, requesting %d part(s)", self.client, header.hash_file.short, len(missing))
        self._reply(header.sender, header.hash_file, AckKind.MISSING_PARTS, missing)
        self._arm_watchdog(key, assembly)
