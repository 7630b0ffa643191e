import pytest

from src.errors import IllegalTransition
from src.nodes.status import FileStatusManager, TransferStatus, replay_journal
from src.protocol.fragmentation import compute_hash_file

H1 = compute_hash_file(b"one")
H2 = compute_hash_file(b"two")


def _manager(tmp_path, **kwargs):
    return FileStatusManager(tmp_path / "status.journal", clock=lambda: "2024-01-01T00:00:00.000+00:00", **kwargs)


def test_lifecycle_is_journaled(tmp_path):
    status = _manager(tmp_path)
    status.set(H1, TransferStatus.PENDING)
    status.set(H1, TransferStatus.PENDING)
    status.set(H1, TransferStatus.WORKING)
    status.set(H1, TransferStatus.COMPLETED)
    lines = (tmp_path / "status.journal").read_text().splitlines()
    assert lines == [
        f"2024-01-01T00:00:00.000+00:00 {H1.hex} pending",
        f"2024-01-01T00:00:00.000+00:00 {H1.hex} pending",
        f"2024-01-01T00:00:00.000+00:00 {H1.hex} working",
        f"2024-01-01T00:00:00.000+00:00 {H1.hex} completed",
    ]


@pytest.mark.parametrize(
    "path",
    [
        [TransferStatus.WORKING],
        [TransferStatus.COMPLETED],
        [TransferStatus.PENDING, TransferStatus.COMPLETED],
        [TransferStatus.PENDING, TransferStatus.WORKING, TransferStatus.PENDING],
        [TransferStatus.PENDING, TransferStatus.WORKING, TransferStatus.WORKING],
    ],
)
def test_illegal_transitions_raise(tmp_path, path):
    status = _manager(tmp_path)
    *legal, last = path
    for step in legal:
        status.set(H1, step)
    with pytest.raises(IllegalTransition):
        status.set(H1, last)
    assert status.get(H1) == (legal[-1] if legal else None)


def test_restart_only_after_completion(tmp_path):
    status = _manager(tmp_path)
    status.set(H1, TransferStatus.PENDING)
    with pytest.raises(IllegalTransition):
        status.restart(H1)
    status.set(H1, TransferStatus.WORKING)
    status.set(H1, TransferStatus.COMPLETED)
    status.restart(H1)
    assert status.get(H1) is TransferStatus.PENDING


def test_replay_rebuilds_last_status(tmp_path):
    status = _manager(tmp_path)
    status.set(H1, TransferStatus.PENDING)
    status.set(H2, TransferStatus.PENDING)
    status.set(H1, TransferStatus.WORKING)
    with (tmp_path / "status.journal").open("a") as fh:
        fh.write("garbage\n")
        fh.write(f"2024 {H2.hex} exploded\n")
        fh.write(f"2024 {H2.hex[:10]}")
    assert replay_journal(tmp_path / "status.journal") == {H1: TransferStatus.WORKING, H2: TransferStatus.PENDING}

    again = _manager(tmp_path)
    assert again.get(H1) is TransferStatus.WORKING
    assert len(again) == 2
    fresh = _manager(tmp_path, replay=False)
    assert len(fresh) == 0


def test_memory_only_manager():
    status = FileStatusManager()
    status.set(H1, TransferStatus.PENDING)
    assert dict(status.items()) == {H1: TransferStatus.PENDING}
