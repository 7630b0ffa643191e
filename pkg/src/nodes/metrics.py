"""
Per-node counters and per-transfer records.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

OUTCOME_PENDING = "pending"
OUTCOME_COMPLETED = "completed"
OUTCOME_FAILED = "failed"
OUTCOME_REJECTED = "rejected"
OUTCOME_HALTED = "halted"


@dataclass
class TransferRecord:
    hash_file: str
    sender: str
    receiver: str
    package_name: str
    file_name: str
    size: int
    start_s: Optional[float] = None
    end_s: Optional[float] = None
    retries: int = 0
    missing_rounds: int = 0
    outcome: str = OUTCOME_PENDING


@dataclass
class MetricsCounters:
    """Counters only ever grow during a run."""

    files_sent: int = 0
    files_received: int = 0
    duplicates_received: int = 0
    images_restored: int = 0
    retransmission_requests: int = 0
    retransmissions: int = 0
    bytes_on_wire: int = 0
    transfers_begun: int = 0
    transfers_completed: int = 0
    transfers_failed: int = 0
    transfers_rejected: int = 0
    transfers_revived: int = 0
    assemblies_abandoned: int = 0
    unknown_acks: int = 0
    unknown_fragments: int = 0
    mismatched_fragments: int = 0
    malformed_messages: int = 0
    hash_mismatches: int = 0
    protocol_violations: int = 0
    first_header_s: Optional[float] = None
    last_restore_s: Optional[float] = None
    transfers: List[TransferRecord] = field(default_factory=list)
    restorations: List[Tuple[str, str, float]] = field(default_factory=list)

    def note_header_sent(self, now: float) -> None:
        if self.first_header_s is None or now < self.first_header_s:
            self.first_header_s = now

    def note_restored(self, hash_hex: str, sender: str, now: float) -> None:
        self.images_restored += 1
        self.restorations.append((hash_hex, sender, now))
        if self.last_restore_s is None or now > self.last_restore_s:
            self.last_restore_s = now

    def counter_fields(self) -> Dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.type in ("int", int)}

    def transfer_rows(self) -> List[dict]:
        return [asdict(record) for record in self.transfers]
