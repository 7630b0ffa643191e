import random
import shutil
import tempfile
from pathlib import Path

import pytest
from hypothesis import settings, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from conftest import ManualTransport
from src.config import ProtocolTimers
from src.errors import DuplicateActiveTransfer, EmptyInput
from src.nodes.metrics import MetricsCounters
from src.nodes.sender import FAILURE_HALTED, FAILURE_REJECTED, FAILURE_RETRIES, HEADER_FILE, ImageSender
from src.nodes.status import FileStatusManager, TransferStatus, replay_journal
from src.protocol.codec import AckKind, AckMessage, SenderId, decode_fragment, decode_header
from src.protocol.fragmentation import compute_hash_file

TIMERS = ProtocolTimers(inter_send_min_s=0.0, inter_send_max_s=0.0)
IMAGE = b"0123456789"  # three parts of 4, 4 and 2 bytes


def _sender(transport: ManualTransport, root: Path, *, resilient: bool = False, status=None) -> ImageSender:
    transport.register("PC1", None)

    def publish(topic: str, payload: bytes) -> bool:
        transport.publish("PC1", topic, payload)
        return True

    return ImageSender(
        "PC1",
        SenderId("PC1"),
        "orch",
        transport,
        publish,
        status=status or FileStatusManager(root / "status.journal"),
        metrics=MetricsCounters(),
        temp_root=root / "tmp",
        rng=random.Random(0),
        timers=TIMERS,
        chunk_size=4,
        resilient=resilient,
    )


def _ack(hash_file, kind, missing=()):
    return AckMessage(hash_file, kind, tuple(missing))


@pytest.fixture
def sender(manual, tmp_path):
    return _sender(manual, tmp_path)


def test_begin_writes_temp_files_and_announces(sender, manual, tmp_path):
    digest = sender.begin_transfer(IMAGE, "Sample PC1", "img_001.bin")
    temp = tmp_path / "tmp" / digest.hex
    assert sorted(p.name for p in temp.iterdir()) == ["0.frag", "1.frag", "2.frag", HEADER_FILE]
    assert sender.status.get(digest) is TransferStatus.PENDING

    manual.advance(0)
    headers = manual.take("send_header")
    assert [m.topic for m in headers] == ["net/orch/send_header"]
    assert decode_header(headers[0].payload).hash_file == digest
    assert sender.metrics.files_sent == 1
    assert sender.transfer(digest).record.start_s == 0


def test_empty_image_is_refused(sender):
    with pytest.raises(EmptyInput):
        sender.begin_transfer(b"", "p", "f")


def test_same_image_twice_while_active(sender):
    sender.begin_transfer(IMAGE, "p", "f")
    with pytest.raises(DuplicateActiveTransfer):
        sender.begin_transfer(IMAGE, "p", "f")


def test_header_retries_then_fails(sender, manual, tmp_path):
    digest = sender.begin_transfer(IMAGE, "p", "f")
    manual.advance(54)
    assert len(manual.take("send_header")) == 11
    assert not sender.transfer(digest).failed
    manual.advance(1)
    transfer = sender.transfer(digest)
    assert transfer.failure == FAILURE_RETRIES
    assert transfer.record.outcome == "failed"
    assert transfer.record.retries == 10
    assert sender.metrics.retransmissions == 10
    assert sender.metrics.transfers_failed == 1
    assert (tmp_path / "tmp" / digest.hex).is_dir()
    assert sender.idle


def test_accept_sends_every_fragment(sender, manual):
    digest = sender.begin_transfer(IMAGE, "p", "f")
    manual.advance(0)
    manual.take()
    sender.on_ack(_ack(digest, AckKind.ACCEPTED))
    fragments = [decode_fragment(m.payload) for m in manual.take("hash_sender_orq")]
    assert [f.part_index for f in fragments] == [0, 1, 2]
    assert b"".join(f.payload for f in fragments) == IMAGE
    assert sender.status.get(digest) is TransferStatus.WORKING
    assert sender.metrics.files_sent == 4

    # A repeated accept does not resend.
    sender.on_ack(_ack(digest, AckKind.ACCEPTED))
    assert manual.take() == []


def test_missing_parts_are_resent(sender, manual):
    digest = sender.begin_transfer(IMAGE, "p", "f")
    manual.advance(0)
    sender.on_ack(_ack(digest, AckKind.ACCEPTED))
    manual.take()
    sender.on_ack(_ack(digest, AckKind.MISSING_PARTS, [0, 2]))
    assert [decode_fragment(m.payload).part_index for m in manual.take()] == [0, 2]
    assert sender.metrics.retransmissions == 2
    assert sender.transfer(digest).record.missing_rounds == 1


def test_missing_index_out_of_range_is_a_violation(sender, manual):
    digest = sender.begin_transfer(IMAGE, "p", "f")
    manual.advance(0)
    sender.on_ack(_ack(digest, AckKind.ACCEPTED))
    manual.take()
    sender.on_ack(_ack(digest, AckKind.MISSING_PARTS, [1, 7]))
    assert [decode_fragment(m.payload).part_index for m in manual.take()] == [1]
    assert sender.metrics.protocol_violations == 1


def test_completed_cleans_up_and_launches_next(sender, manual, tmp_path):
    first = sender.begin_transfer(IMAGE, "p", "a")
    second = sender.begin_transfer(b"another image", "p", "b")
    manual.advance(0)
    assert [decode_header(m.payload).hash_file for m in manual.take("send_header")] == [first]
    sender.on_ack(_ack(first, AckKind.ACCEPTED))
    manual.advance(0.5)
    sender.on_ack(_ack(first, AckKind.COMPLETED))

    record = sender.transfer(first).record
    assert record.outcome == "completed"
    assert record.end_s == 0.5
    assert sender.status.get(first) is TransferStatus.COMPLETED
    assert not (tmp_path / "tmp" / first.hex).exists()
    manual.advance(0)
    assert [decode_header(m.payload).hash_file for m in manual.take("send_header")] == [second]


def test_completed_straight_from_pending(sender, manual):
    digest = sender.begin_transfer(IMAGE, "p", "f")
    manual.advance(0)
    sender.on_ack(_ack(digest, AckKind.COMPLETED))
    assert sender.status.get(digest) is TransferStatus.COMPLETED
    statuses = [line.split()[2] for line in (sender.status.journal_path).read_text().splitlines()]
    assert statuses == ["pending", "working", "completed"]
    assert sender.idle


def test_rejected_keeps_temp_files(sender, manual, tmp_path):
    digest = sender.begin_transfer(IMAGE, "p", "f")
    manual.advance(0)
    sender.on_ack(_ack(digest, AckKind.REJECTED))
    transfer = sender.transfer(digest)
    assert transfer.failure == FAILURE_REJECTED
    assert transfer.record.outcome == "rejected"
    assert sender.metrics.transfers_rejected == 1
    assert (tmp_path / "tmp" / digest.hex / HEADER_FILE).is_file()
    # Late acks for a failed transfer are ignored.
    sender.on_ack(_ack(digest, AckKind.ACCEPTED))
    assert manual.take("hash_sender_orq") == []


def test_out_of_order_acks_are_violations(sender, manual):
    digest = sender.begin_transfer(IMAGE, "p", "f")
    manual.advance(0)
    sender.on_ack(_ack(digest, AckKind.MISSING_PARTS, [0]))
    assert sender.metrics.protocol_violations == 1
    sender.on_ack(_ack(digest, AckKind.ACCEPTED))
    sender.on_ack(_ack(digest, AckKind.REJECTED))
    assert sender.metrics.protocol_violations == 2
    assert sender.status.get(digest) is TransferStatus.WORKING


def test_unknown_ack_is_counted(sender):
    sender.on_ack(_ack(compute_hash_file(b"never sent"), AckKind.COMPLETED))
    assert sender.metrics.unknown_acks == 1


def test_completion_probe_reannounces_header(sender, manual):
    digest = sender.begin_transfer(IMAGE, "p", "f")
    manual.advance(0)
    sender.on_ack(_ack(digest, AckKind.ACCEPTED))
    manual.take()
    manual.advance(29)
    assert manual.take("send_header") == []
    manual.advance(1)
    assert len(manual.take("send_header")) == 1
    assert sender.transfer(digest).header_retries == 1
    sender.on_ack(_ack(digest, AckKind.COMPLETED))
    manual.advance(120)
    assert manual.take() == []
    assert sender.idle


def test_resilient_sender_revives_on_late_ack(manual, tmp_path):
    sender = _sender(manual, tmp_path, resilient=True)
    digest = sender.begin_transfer(IMAGE, "p", "f")
    manual.advance(60)
    assert sender.transfer(digest).failure == FAILURE_RETRIES
    manual.take()
    sender.on_ack(_ack(digest, AckKind.ACCEPTED))
    transfer = sender.transfer(digest)
    assert not transfer.failed
    assert sender.metrics.transfers_revived == 1
    assert len(manual.take("hash_sender_orq")) == 3
    sender.on_ack(_ack(digest, AckKind.COMPLETED))
    assert transfer.record.outcome == "completed"


def test_resume_picks_up_unfinished_transfers(manual, tmp_path):
    sender = _sender(manual, tmp_path)
    working = sender.begin_transfer(IMAGE, "p", "a")
    pending = sender.begin_transfer(b"still queued", "p", "b")
    manual.advance(0)
    sender.on_ack(_ack(working, AckKind.ACCEPTED))

    restarted = ManualTransport()
    again = _sender(restarted, tmp_path, status=FileStatusManager(tmp_path / "status.journal"))
    assert again.resume() == 2
    assert again.transfer(working).status is TransferStatus.WORKING
    assert again.transfer(working).awaiting_ack
    assert again.transfer(pending).status is TransferStatus.PENDING

    restarted.advance(0)
    (announced,) = [decode_header(m.payload).hash_file for m in restarted.take("send_header")]
    assert announced in (working, pending)
    again.on_ack(_ack(announced, AckKind.ACCEPTED))
    assert len(restarted.take("hash_sender_orq")) == 3


def test_resume_discards_completed_leftovers(manual, tmp_path):
    sender = _sender(manual, tmp_path)
    digest = sender.begin_transfer(IMAGE, "p", "f")
    leftover = tmp_path / "tmp" / digest.hex
    header_bytes = (leftover / HEADER_FILE).read_bytes()
    manual.advance(0)
    sender.on_ack(_ack(digest, AckKind.COMPLETED))
    leftover.mkdir(parents=True)
    (leftover / HEADER_FILE).write_bytes(header_bytes)
    again = _sender(ManualTransport(), tmp_path, status=FileStatusManager(tmp_path / "status.journal"))
    assert again.resume() == 0
    assert not leftover.exists()


def test_halt_fails_everything(sender, manual):
    first = sender.begin_transfer(IMAGE, "p", "a")
    second = sender.begin_transfer(b"another image", "p", "b")
    manual.advance(0)
    manual.take()
    sender.halt()
    assert sender.transfer(first).failure == FAILURE_HALTED
    assert sender.transfer(second).record.outcome == "halted"
    manual.advance(100)
    assert manual.take() == []
    third = sender.begin_transfer(b"too late", "p", "c")
    assert sender.transfer(third).failure == FAILURE_HALTED


# Every (status, event) pair against the transition table in the sender's docstring.
# Expected: status afterwards, failure, fragments published, headers published, violations.
TRANSITIONS = {
    ("pending", "accepted"): (TransferStatus.WORKING, None, 3, 0, 0),
    ("pending", "rejected"): (TransferStatus.PENDING, FAILURE_REJECTED, 0, 0, 0),
    ("pending", "missing"): (TransferStatus.PENDING, None, 0, 0, 1),
    ("pending", "completed"): (TransferStatus.COMPLETED, None, 0, 0, 0),
    ("pending", "timer"): (TransferStatus.PENDING, None, 0, 1, 0),
    ("working", "accepted"): (TransferStatus.WORKING, None, 0, 0, 0),
    ("working", "rejected"): (TransferStatus.WORKING, None, 0, 0, 1),
    ("working", "missing"): (TransferStatus.WORKING, None, 2, 0, 0),
    ("working", "completed"): (TransferStatus.COMPLETED, None, 0, 0, 0),
    ("working", "timer"): (TransferStatus.WORKING, None, 0, 1, 0),
    ("completed", "accepted"): (TransferStatus.COMPLETED, None, 0, 0, 0),
    ("completed", "rejected"): (TransferStatus.COMPLETED, None, 0, 0, 1),
    ("completed", "missing"): (TransferStatus.COMPLETED, None, 0, 0, 1),
    ("completed", "completed"): (TransferStatus.COMPLETED, None, 0, 0, 0),
    ("completed", "timer"): (TransferStatus.COMPLETED, None, 0, 0, 0),
}
TIMER_PERIOD = {"pending": TIMERS.header_retry_s, "working": TIMERS.completion_probe_s, "completed": TIMERS.completion_probe_s}
EVENT_ACKS = {
    "accepted": (AckKind.ACCEPTED, ()),
    "rejected": (AckKind.REJECTED, ()),
    "missing": (AckKind.MISSING_PARTS, (0, 2)),
    "completed": (AckKind.COMPLETED, ()),
}


@pytest.mark.parametrize("status, event", sorted(TRANSITIONS), ids=lambda v: str(v))
def test_transition_table(sender, manual, tmp_path, status, event):
    digest = sender.begin_transfer(IMAGE, "p", "f")
    manual.advance(0)
    if status in ("working", "completed"):
        sender.on_ack(_ack(digest, AckKind.ACCEPTED))
    if status == "completed":
        sender.on_ack(_ack(digest, AckKind.COMPLETED))
    manual.take()
    violations = sender.metrics.protocol_violations

    if event == "timer":
        manual.advance(TIMER_PERIOD[status])
    else:
        kind, missing = EVENT_ACKS[event]
        sender.on_ack(_ack(digest, kind, missing))

    expected_status, failure, fragments, headers, new_violations = TRANSITIONS[(status, event)]
    transfer = sender.transfer(digest)
    assert transfer.status is expected_status
    assert transfer.failure == failure
    assert len(manual.take("hash_sender_orq")) == fragments
    assert len(manual.take("send_header")) == headers
    assert sender.metrics.protocol_violations - violations == new_violations
    assert replay_journal(tmp_path / "status.journal")[digest] is expected_status
    assert (tmp_path / "tmp" / digest.hex).is_dir() is (expected_status is not TransferStatus.COMPLETED)


class SenderMachine(RuleBasedStateMachine):
    """Random ack and timer sequences never break the journal or the temp dir contract."""

    def __init__(self):
        super().__init__()
        self.root = Path(tempfile.mkdtemp(prefix="sender-machine-"))
        self.transport = ManualTransport()
        self.sender = _sender(self.transport, self.root)
        self.digest = self.sender.begin_transfer(IMAGE, "p", "f")
        self.transport.advance(0)

    def teardown(self):
        shutil.rmtree(self.root, ignore_errors=True)

    @property
    def transfer(self):
        return self.sender.transfer(self.digest)

    @rule(kind=st.sampled_from([AckKind.ACCEPTED, AckKind.COMPLETED, AckKind.REJECTED]))
    def plain_ack(self, kind):
        self.sender.on_ack(_ack(self.digest, kind))

    @rule(missing=st.sets(st.integers(min_value=0, max_value=2), min_size=1))
    def missing_ack(self, missing):
        self.sender.on_ack(_ack(self.digest, AckKind.MISSING_PARTS, sorted(missing)))

    @rule(seconds=st.floats(min_value=0.0, max_value=40.0))
    def wait(self, seconds):
        self.transport.advance(seconds)

    @invariant()
    def journal_matches_memory(self):
        assert replay_journal(self.root / "status.journal")[self.digest] is self.transfer.status

    @invariant()
    def temp_dir_lives_until_completion(self):
        exists = (self.root / "tmp" / self.digest.hex).is_dir()
        assert exists is (self.transfer.status is not TransferStatus.COMPLETED)

    @invariant()
    def unfinished_transfers_keep_a_timer(self):
        transfer = self.transfer
        if transfer.finished:
            assert transfer.timer is None
            assert self.sender.idle
        else:
            assert transfer.timer is not None and not transfer.timer.cancelled

    @invariant()
    def retries_stay_within_budget(self):
        assert self.transfer.header_retries <= TIMERS.max_header_retries


SenderMachine.TestCase.settings = settings(max_examples=60, stateful_step_count=30, deadline=None)
test_sender_machine = SenderMachine.TestCase
