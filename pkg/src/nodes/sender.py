"""
Image Sender: the sending side of a transfer.

The sender splits an image, keeps its fragments in a temp dir, announces the
header, and answers receiver acks:

    status     | accepted          | rejected       | missing      | completed
    -----------+-------------------+----------------+--------------+-----------------
    pending    | working, send all | fail, keep tmp | violation    | completed, clean
    working    | no-op             | violation      | resend listed| completed, clean
    completed  | no-op             | violation      | violation    | no-op

Acks for failed transfers are ignored, except that a resilient sender revives a
transfer that ran out of header retries when a late accepted/completed ack
arrives. One sender serves one receiver and runs one transfer at a time.
"""

from __future__ import annotations

import logging
import random
import shutil
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Deque, Dict, Iterable, List, Mapping, Optional

from src.config import CHUNK_SIZE, DEFAULT_TIMERS, ProtocolTimers
from src.errors import ChunkRelayError, DuplicateActiveTransfer, EmptyInput, IoFailure, MalformedMessage
from src.nodes.metrics import (
    OUTCOME_COMPLETED,
    OUTCOME_FAILED,
    OUTCOME_HALTED,
    OUTCOME_PENDING,
    OUTCOME_REJECTED,
    MetricsCounters,
    TransferRecord,
)
from src.nodes.status import FileStatusManager, TransferStatus
from src.protocol.codec import (
    AckKind,
    AckMessage,
    Fragment,
    HashId,
    ImageHeader,
    SenderId,
    decode_fragment,
    decode_header,
    encode_fragment,
    encode_header,
)
from src.protocol.fragmentation import split
from src.transport.base import TimerHandle, Transport
from src.transport.topics import fragment_topic, send_header_topic

logger = logging.getLogger(__name__)

HEADER_FILE = "header.json"
FAILURE_RETRIES = "retries"
FAILURE_REJECTED = "rejected"
FAILURE_HALTED = "halted"

PublishFn = Callable[[str, bytes], bool]


def write_temp(temp_dir: Path, header: ImageHeader, fragments: Iterable[Fragment]) -> None:
    """Persist a transfer as `header.json` plus one `<index>.frag` per fragment."""
    try:
        temp_dir.mkdir(parents=True, exist_ok=True)
        for fragment in fragments:
            (temp_dir / f"{fragment.part_index}.frag").write_bytes(encode_fragment(fragment))
        (temp_dir / HEADER_FILE).write_bytes(encode_header(header))
    except OSError as exc:
        raise IoFailure(f"cannot write transfer files to {temp_dir}: {exc}") from exc


def read_temp_header(temp_dir: Path) -> ImageHeader:
    try:
        return decode_header((temp_dir / HEADER_FILE).read_bytes())
    except OSError as exc:
        raise IoFailure(f"cannot read {temp_dir / HEADER_FILE}: {exc}") from exc


def read_temp_fragments(temp_dir: Path, header: ImageHeader) -> List[Fragment]:
    fragments = []
    for index in range(header.total_parts):
        try:
            fragment = decode_fragment((temp_dir / f"{index}.frag").read_bytes())
        except OSError as exc:
            raise IoFailure(f"cannot read fragment {index} in {temp_dir}: {exc}") from exc
        if fragment.hash_file != header.hash_file or fragment.part_index != index:
            raise MalformedMessage(f"{temp_dir}/{index}.frag belongs to another transfer")
        fragments.append(fragment)
    return fragments


@dataclass(eq=False)
class OutgoingTransfer:
    header: ImageHeader
    temp_dir: Path
    record: TransferRecord
    status: TransferStatus = TransferStatus.PENDING
    header_retries: int = 0
    retry_timer_deadline: Optional[float] = None
    fragments: List[Fragment] = field(default_factory=list)
    fragments_sent: bool = False
    failure: Optional[str] = None
    timer: Optional[TimerHandle] = None

    @property
    def hash_file(self) -> HashId:
        return self.header.hash_file

    @property
    def failed(self) -> bool:
        return self.failure is not None

    @property
    def finished(self) -> bool:
        return self.failed or self.status is TransferStatus.COMPLETED

    @property
    def awaiting_ack(self) -> bool:
        # A transfer resumed from the journal in `working` has not resent its fragments yet.
        return self.status is TransferStatus.PENDING or (
            self.status is TransferStatus.WORKING and not self.fragments_sent
        )

    def load_fragments(self) -> List[Fragment]:
        if not self.fragments:
            self.fragments = read_temp_fragments(self.temp_dir, self.header)
        return self.fragments

    def cancel_timer(self) -> None:
        if self.timer is not None:
            self.timer.cancel()
            self.timer = None
        self.retry_timer_deadline = None


class ImageSender:
    def __init__(
        self,
        client: str,
        sender_id: SenderId,
        target: str,
        transport: Transport,
        publish: PublishFn,
        *,
        status: FileStatusManager,
        metrics: MetricsCounters,
        temp_root: Path,
        rng: random.Random,
        timers: ProtocolTimers = DEFAULT_TIMERS,
        chunk_size: int = CHUNK_SIZE,
        resilient: bool = False,
    ) -> None:
        self.client = client
        self.sender_id = sender_id
        self.target = target
        self.transport = transport
        self.status = status
        self.metrics = metrics
        self.temp_root = Path(temp_root)
        self.timers = timers
        self.chunk_size = chunk_size
        self.resilient = resilient
        self.halted = False
        self._publish = publish
        self._rng = rng
        self._queue: Deque[OutgoingTransfer] = deque()
        self._active: Optional[OutgoingTransfer] = None
        self._launch_timer: Optional[TimerHandle] = None
        self._transfers: Dict[HashId, OutgoingTransfer] = {}
        self.on_idle: Optional[Callable[[], None]] = None

    @property
    def idle(self) -> bool:
        return self._active is None and not self._queue

    def transfer(self, hash_file: HashId) -> Optional[OutgoingTransfer]:
        return self._transfers.get(hash_file)

    def begin_transfer(
        self,
        image: bytes,
        package_name: str,
        file_name: str,
        annotations: Optional[Mapping[str, str]] = None,
    ) -> HashId:
        """Split and persist an image, then queue it behind earlier transfers."""
        if not image:
            raise EmptyInput("cannot transfer an empty image")
        header, fragments = split(
            image,
            self.chunk_size,
            sender=self.sender_id,
            package_name=package_name,
            file_name=file_name,
            annotations=annotations,
        )
        existing = self._transfers.get(header.hash_file)
        if existing is not None and not existing.finished:
            raise DuplicateActiveTransfer(f"{header.hash_file.short} is already in flight to {self.target}")
        temp_dir = self.temp_root / header.hash_file.hex
        write_temp(temp_dir, header, fragments)
        self._enqueue(header, temp_dir)
        return header.hash_file

    def resume(self) -> int:
        """Queue every unfinished transfer found in the temp dir; returns how many."""
        if not self.temp_root.is_dir():
            return 0
        resumed = 0
        for temp_dir in sorted(p for p in self.temp_root.iterdir() if (p / HEADER_FILE).is_file()):
            try:
                header = read_temp_header(temp_dir)
            except ChunkRelayError as exc:
                logger.warning("skipping unreadable transfer in %s: %s", temp_dir, exc)
                continue
            if self.status.get(header.hash_file) is TransferStatus.COMPLETED:
                shutil.rmtree(temp_dir, ignore_errors=True)
                continue
            existing = self._transfers.get(header.hash_file)
            if existing is not None and not existing.finished:
                continue
            self._enqueue(header, temp_dir)
            resumed += 1
        if resumed:
            logger.info("%s resumed %d unfinished transfer(s) toward %s", self.sender_id, resumed, self.target)
        return resumed

    def _enqueue(self, header: ImageHeader, temp_dir: Path) -> None:
        current = self.status.get(header.hash_file)
        if current is TransferStatus.COMPLETED:
            self.status.restart(header.hash_file)
            current = TransferStatus.PENDING
        elif current is not TransferStatus.WORKING:
            self.status.set(header.hash_file, TransferStatus.PENDING)
            current = TransferStatus.PENDING
        record = TransferRecord(
            hash_file=header.hash_file.hex,
            sender=self.sender_id.value,
            receiver=self.target,
            package_name=header.package_name,
            file_name=header.file_name,
            size=header.file_size,
        )
        transfer = OutgoingTransfer(header, temp_dir, record, status=current)
        self._transfers[header.hash_file] = transfer
        self.metrics.transfers.append(record)
        self.metrics.transfers_begun += 1
        if self.halted:
            self._fail(transfer, FAILURE_HALTED)
            return
        self._queue.append(transfer)
        self._pump()

    # Send queue.

    def _pump(self) -> None:
        if self.halted or self._active is not None or self._launch_timer is not None or not self._queue:
            return
        transfer = self._queue.popleft()
        self._active = transfer
        delay = self._rng.uniform(self.timers.inter_send_min_s, self.timers.inter_send_max_s)
        self._launch_timer = self.transport.call_later(self.client, delay, lambda: self._launch(transfer))

    def _launch(self, transfer: OutgoingTransfer) -> None:
        self._launch_timer = None
        if self.halted:
            return
        if transfer.finished:
            self._release(transfer)
            return
        transfer.record.start_s = self.transport.now()
        logger.debug(
            "%s -> %s: header %s (%s/%s, %d parts)",
            self.sender_id,
            self.target,
            transfer.hash_file.short,
            transfer.header.package_name,
            transfer.header.file_name,
            transfer.header.total_parts,
        )
        self._publish_header(transfer, retry=False)
        self._arm_retry(transfer)

    def _release(self, transfer: OutgoingTransfer) -> None:
        if self._active is transfer:
            self._active = None
            if self._launch_timer is not None:
                self._launch_timer.cancel()
                self._launch_timer = None
            self._pump()
            if self.idle and self.on_idle is not None:
                self.on_idle()

    # Timers.

    def _arm_retry(self, transfer: OutgoingTransfer) -> None:
        # Unacknowledged headers retry quickly; sent fragments wait a probe period for `completed`.
        period = self.timers.header_retry_s if transfer.awaiting_ack else self.timers.completion_probe_s
        transfer.cancel_timer()
        transfer.retry_timer_deadline = self.transport.now() + period
        transfer.timer = self.transport.call_later(self.client, period, lambda: self.on_timer(transfer.hash_file))

    def on_timer(self, hash_file: HashId) -> None:
        """
        Header retry: resend while unacknowledged, fail once the budget is spent.

        A transfer whose fragments are out re-announces its header on the probe
        period, so a lost `completed` ack cannot stall the send queue.
        """
        transfer = self._transfers.get(hash_file)
        if transfer is None or transfer.finished or self.halted:
            return
        transfer.timer = None
        if transfer.header_retries >= self.timers.max_header_retries:
            logger.info(
                "%s: no answer to header %s after %d retries", self.sender_id, hash_file.short, transfer.header_retries
            )
            self._fail(transfer, FAILURE_RETRIES)
            return
        transfer.header_retries += 1
        transfer.record.retries = transfer.header_retries
        if transfer.status is TransferStatus.PENDING:
            self.status.set(hash_file, TransferStatus.PENDING)
        self._publish_header(transfer, retry=True)
        self._arm_retry(transfer)

    # Acks.

    def on_ack(self, ack: AckMessage) -> None:
        transfer = self._transfers.get(ack.hash_file)
        if transfer is None:
            self.metrics.unknown_acks += 1
            logger.debug("%s: ack %s for unknown transfer %s", self.sender_id, ack.kind.value, ack.hash_file.short)
            return
        if transfer.failed:
            if (
                self.resilient
                and not self.halted
                and transfer.failure == FAILURE_RETRIES
                and ack.kind in (AckKind.ACCEPTED, AckKind.COMPLETED)
            ):
                self._revive(transfer, ack)
            return

        kind = ack.kind
        if kind is AckKind.ACCEPTED:
            if transfer.awaiting_ack:
                self._accept(transfer)
        elif kind is AckKind.COMPLETED:
            if transfer.status is not TransferStatus.COMPLETED:
                self._complete(transfer)
        elif kind is AckKind.MISSING_PARTS:
            if transfer.status is TransferStatus.WORKING and transfer.fragments_sent:
                self._resend(transfer, ack.missing)
            else:
                self._violation(transfer, ack)
        elif kind is AckKind.REJECTED:
            if transfer.status is TransferStatus.PENDING:
                self._reject(transfer)
            else:
                self._violation(transfer, ack)

    def _accept(self, transfer: OutgoingTransfer) -> None:
        transfer.cancel_timer()
        if transfer.status is TransferStatus.PENDING:
            self.status.set(transfer.hash_file, TransferStatus.WORKING)
            transfer.status = TransferStatus.WORKING
        transfer.fragments_sent = True
        self._arm_retry(transfer)
        topic = fragment_topic(self.target, self.sender_id.value)
        for fragment in transfer.load_fragments():
            if not self._publish(topic, encode_fragment(fragment)):
                logger.debug("%s: stopped sending %s at part %d", self.sender_id, transfer.hash_file.short, fragment.part_index)
                return
            self.metrics.files_sent += 1

    def _resend(self, transfer: OutgoingTransfer, missing: Iterable[int]) -> None:
        fragments = transfer.load_fragments()
        wanted = list(missing)
        valid = [i for i in wanted if i < len(fragments)]
        if len(valid) != len(wanted):
            self.metrics.protocol_violations += 1
        transfer.record.missing_rounds += 1
        topic = fragment_topic(self.target, self.sender_id.value)
        logger.debug("%s: resending %d part(s) of %s", self.sender_id, len(valid), transfer.hash_file.short)
        for index in valid:
            if not self._publish(topic, encode_fragment(fragments[index])):
                return
            self.metrics.retransmissions += 1

    def _complete(self, transfer: OutgoingTransfer) -> None:
        transfer.cancel_timer()
        if transfer.status is TransferStatus.PENDING:
            self.status.set(transfer.hash_file, TransferStatus.WORKING)
        self.status.set(transfer.hash_file, TransferStatus.COMPLETED)
        transfer.status = TransferStatus.COMPLETED
        transfer.fragments = []
        try:
            shutil.rmtree(transfer.temp_dir)
        except FileNotFoundError:
            pass
        except OSError as exc:
            logger.warning("could not remove %s: %s", transfer.temp_dir, exc)
        transfer.record.end_s = self.transport.now()
        transfer.record.outcome = OUTCOME_COMPLETED
        self.metrics.transfers_completed += 1
        logger.debug("%s -> %s: %s completed", self.sender_id, self.target, transfer.hash_file.short)
        self._release(transfer)

    def _reject(self, transfer: OutgoingTransfer) -> None:
        logger.warning("%s: %s rejected by %s; keeping %s", self.sender_id, transfer.hash_file.short, self.target, transfer.temp_dir)
        self.metrics.transfers_rejected += 1
        self._finish_failed(transfer, FAILURE_REJECTED, OUTCOME_REJECTED)

    def _fail(self, transfer: OutgoingTransfer, reason: str) -> None:
        self.metrics.transfers_failed += 1
        self._finish_failed(transfer, reason, OUTCOME_HALTED if reason == FAILURE_HALTED else OUTCOME_FAILED)

    def _finish_failed(self, transfer: OutgoingTransfer, reason: str, outcome: str) -> None:
        transfer.cancel_timer()
        transfer.failure = reason
        transfer.fragments = []
        transfer.record.end_s = self.transport.now()
        transfer.record.outcome = outcome
        self._release(transfer)

    def _revive(self, transfer: OutgoingTransfer, ack: AckMessage) -> None:
        logger.info("%s: late %s for %s, resuming", self.sender_id, ack.kind.value, transfer.hash_file.short)
        transfer.failure = None
        transfer.record.end_s = None
        transfer.record.outcome = OUTCOME_PENDING
        self.metrics.transfers_revived += 1
        if ack.kind is AckKind.ACCEPTED:
            self._accept(transfer)
        else:
            self._complete(transfer)

    def _violation(self, transfer: OutgoingTransfer, ack: AckMessage) -> None:
        self.metrics.protocol_violations += 1
        logger.debug(
            "%s: ignoring %s ack for %s in status %s", self.sender_id, ack.kind.value, transfer.hash_file.short, transfer.status.value
        )

    def _publish_header(self, transfer: OutgoingTransfer, *, retry: bool) -> None:
        if not self._publish(send_header_topic(self.target), encode_header(transfer.header)):
            return
        if retry:
            self.metrics.retransmissions += 1
        else:
            self.metrics.files_sent += 1
        self.metrics.note_header_sent(self.transport.now())

    def halt(self) -> None:
        """Stop for good: cancel timers and fail every queued or active transfer."""
        if self.halted:
            return
        self.halted = True
        if self._launch_timer is not None:
            self._launch_timer.cancel()
            self._launch_timer = None
        pending = ([self._active] if self._active is not None else []) + list(self._queue)
        self._active = None
        self._queue.clear()
        for transfer in pending:
            if not transfer.finished:
                self._fail(transfer, FAILURE_HALTED)
        logger.info("%s halted; %d transfer(s) toward %s abandoned", self.sender_id, len(pending), self.target)
