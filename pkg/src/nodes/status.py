"""
File Status Manager: sender-side transfer statuses backed by an append-only journal.

Journal records are single lines `<iso-time> <hash_hex> <status>`. Replaying the
journal rebuilds the in-memory map; the last record for a hash wins.
"""

from __future__ import annotations

import enum
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, Iterator, Optional, Tuple

from src.errors import IllegalTransition, IoFailure
from src.protocol.codec import HashId

logger = logging.getLogger(__name__)

JOURNAL_NAME = "status.journal"


class TransferStatus(str, enum.Enum):
    PENDING = "pending"
    WORKING = "working"
    COMPLETED = "completed"


LEGAL_TRANSITIONS: Dict[Optional[TransferStatus], frozenset] = {
    None: frozenset({TransferStatus.PENDING}),
    TransferStatus.PENDING: frozenset({TransferStatus.PENDING, TransferStatus.WORKING}),
    TransferStatus.WORKING: frozenset({TransferStatus.COMPLETED}),
    TransferStatus.COMPLETED: frozenset(),
}


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


class FileStatusManager:
    def __init__(
        self,
        journal_path: Optional[Path] = None,
        *,
        replay: bool = True,
        clock: Callable[[], str] = _utc_now,
    ) -> None:
        self.journal_path = Path(journal_path) if journal_path is not None else None
        self._clock = clock
        self._statuses: Dict[HashId, TransferStatus] = {}
        if replay and self.journal_path is not None and self.journal_path.exists():
            self._statuses = dict(replay_journal(self.journal_path))

    def get(self, hash_file: HashId) -> Optional[TransferStatus]:
        return self._statuses.get(hash_file)

    def set(self, hash_file: HashId, status: TransferStatus) -> None:
        current = self._statuses.get(hash_file)
        status = TransferStatus(status)
        if status not in LEGAL_TRANSITIONS[current]:
            raise IllegalTransition(
                f"{hash_file.short}: {current.value if current else 'none'} -> {status.value}"
            )
        self._write(hash_file, status)

    def restart(self, hash_file: HashId) -> None:
        """Begin a fresh lifecycle for an image whose previous transfer completed."""
        if self._statuses.get(hash_file) is not TransferStatus.COMPLETED:
            raise IllegalTransition(f"{hash_file.short}: only completed transfers can restart")
        self._write(hash_file, TransferStatus.PENDING)

    def items(self) -> Iterator[Tuple[HashId, TransferStatus]]:
        return iter(list(self._statuses.items()))

    def __len__(self) -> int:
        return len(self._statuses)

    def _write(self, hash_file: HashId, status: TransferStatus) -> None:
        if self.journal_path is not None:
            try:
                self.journal_path.parent.mkdir(parents=True, exist_ok=True)
                with self.journal_path.open("a", encoding="utf-8") as fh:
                    fh.write(f"{self._clock()} {hash_file.hex} {status.value}\n")
            except OSError as exc:
                raise IoFailure(f"cannot append to {self.journal_path}: {exc}") from exc
        self._statuses[hash_file] = status


def replay_journal(path: Path) -> Dict[HashId, TransferStatus]:
    """Rebuild the status map from a journal; torn or unreadable lines are skipped."""
    statuses: Dict[HashId, TransferStatus] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    for number, line in enumerate(lines, start=1):
        parts = line.split()
        if len(parts) != 3:
            logger.warning("%s:%d: skipping malformed journal line", path, number)
            continue
        try:
            statuses[HashId.from_hex(parts[1])] = TransferStatus(parts[2])
        except ValueError:
            logger.warning("%s:%d: skipping unreadable journal record", path, number)
    return statuses
