"""
Image splitting and restoration.

`split` turns an image into a header plus fragments; an `AssemblyBuffer`
collects fragments on the receiving side and `restore` rebuilds and verifies
the image once every part is present.
"""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

from src.errors import EmptyInput, ForeignFragment, HashMismatch, InvariantViolation, ZeroChunkSize
from src.protocol.codec import Fragment, HashId, ImageHeader, SenderId, ceil_div

logger = logging.getLogger(__name__)


def compute_hash_file(image: bytes) -> HashId:
    if not image:
        raise EmptyInput("cannot hash an empty image")
    return HashId(hashlib.sha256(image).digest())


def split(
    image: bytes,
    chunk_size: int,
    *,
    sender: SenderId,
    package_name: str,
    file_name: str,
    annotations: Optional[Mapping[str, str]] = None,
) -> Tuple[ImageHeader, List[Fragment]]:
    """Partition `image` into ceil(len / chunk_size) fragments and build its header."""
    if not image:
        raise EmptyInput("cannot split an empty image")
    if chunk_size < 1:
        raise ZeroChunkSize(f"chunk_size must be >= 1, got {chunk_size}")
    image = bytes(image)
    hash_file = compute_hash_file(image)
    total = ceil_div(len(image), chunk_size)
    header = ImageHeader(
        hash_file=hash_file,
        sender=sender,
        package_name=package_name,
        file_name=file_name,
        file_size=len(image),
        total_parts=total,
        chunk_size=chunk_size,
        annotations=dict(annotations or {}),
    )
    view = memoryview(image)
    fragments = [
        Fragment.build(hash_file, index, total, bytes(view[index * chunk_size : (index + 1) * chunk_size]))
        for index in range(total)
    ]
    return header, fragments


class MemoryBudget:
    """Shared in-memory byte budget across a receiver's assembly buffers."""

    def __init__(self, limit_bytes: int) -> None:
        self.limit_bytes = limit_bytes
        self.used_bytes = 0

    def try_reserve(self, n: int) -> bool:
        if self.used_bytes + n > self.limit_bytes:
            return False
        self.used_bytes += n
        return True

    def release(self, n: int) -> None:
        self.used_bytes = max(0, self.used_bytes - n)


@dataclass(frozen=True)
class SpilledPart:
    path: Path
    length: int

    def read(self) -> bytes:
        return self.path.read_bytes()


class IngestResult(enum.Enum):
    NEW = "new"
    DUPLICATE = "duplicate"
    MISMATCH = "mismatch"


@dataclass(frozen=True)
class MissingReport:
    hash_file: HashId
    missing: Tuple[int, ...]


@dataclass
class AssemblyBuffer:
    header: ImageHeader
    received: bytearray = field(init=False)
    parts: Dict[int, Union[bytes, SpilledPart]] = field(default_factory=dict)
    bytes_received: int = 0
    budget: Optional[MemoryBudget] = None
    spill_dir: Optional[Path] = None

    def __post_init__(self) -> None:
        self.received = bytearray(self.header.total_parts)

    @property
    def hash_file(self) -> HashId:
        return self.header.hash_file

    @property
    def popcount(self) -> int:
        return len(self.parts)

    @property
    def complete(self) -> bool:
        return len(self.parts) == self.header.total_parts

    def missing(self) -> Tuple[int, ...]:
        return tuple(i for i, flag in enumerate(self.received) if not flag)

    def payload(self, index: int) -> bytes:
        part = self.parts[index]
        return part.read() if isinstance(part, SpilledPart) else part

    def _store(self, index: int, payload: bytes) -> None:
        if self.budget is None or self.spill_dir is None or self.budget.try_reserve(len(payload)):
            self.parts[index] = payload
            return
        self.spill_dir.mkdir(parents=True, exist_ok=True)
        path = self.spill_dir / f"{self.hash_file.hex}.{index}.part"
        path.write_bytes(payload)
        self.parts[index] = SpilledPart(path, len(payload))
        logger.debug("spilled part %d of %s to %s", index, self.hash_file.short, path)

    def discard(self) -> None:
        """Drop every stored part, releasing memory and spill files."""
        for part in self.parts.values():
            if isinstance(part, SpilledPart):
                part.path.unlink(missing_ok=True)
            elif self.budget is not None and self.spill_dir is not None:
                self.budget.release(len(part))
        self.parts.clear()
        self.received = bytearray(self.header.total_parts)
        self.bytes_received = 0


def ingest_fragment(buf: AssemblyBuffer, f: Fragment) -> IngestResult:
    """
    Offer one fragment to the buffer.

    First arrival of an index is stored; a repeat with identical bytes is a
    duplicate and a repeat with different bytes is a mismatch (first write wins).
    """
    header = buf.header
    if f.hash_file != header.hash_file or f.total_parts != header.total_parts:
        raise ForeignFragment(
            f"fragment {f.hash_file.short}/{f.total_parts} offered to buffer "
            f"{header.hash_file.short}/{header.total_parts}"
        )
    if len(f.payload) != header.expected_payload_len(f.part_index):
        raise InvariantViolation(
            f"part {f.part_index} has {len(f.payload)} bytes, expected "
            f"{header.expected_payload_len(f.part_index)}"
        )
    if buf.received[f.part_index]:
        if buf.payload(f.part_index) == f.payload:
            return IngestResult.DUPLICATE
        return IngestResult.MISMATCH
    buf._store(f.part_index, f.payload)
    buf.received[f.part_index] = 1
    buf.bytes_received += len(f.payload)
    return IngestResult.NEW


def restore(buf: AssemblyBuffer) -> Union[bytes, MissingReport]:
    """Concatenate a full buffer and verify it, or report the absent indices."""
    if not buf.complete:
        return MissingReport(buf.hash_file, buf.missing())
    image = b"".join(buf.payload(i) for i in range(buf.header.total_parts))
    if compute_hash_file(image) != buf.hash_file:
        raise HashMismatch(f"assembled bytes do not hash to {buf.hash_file.short}")
    return image
