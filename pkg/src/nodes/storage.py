"""
Restored-image storage with an SQL index.

Files live under `<root>/<sender>/<package>/<file>`; the index row for each
image is unique per (hash_file, sender), so replays never create a second copy.
"""

from __future__ import annotations

import fnmatch
import hashlib
import logging
import os
from pathlib import Path, PurePosixPath
from typing import List, Optional

from sqlalchemy import func
from sqlalchemy.exc import IntegrityError, SQLAlchemyError

from src.errors import IoFailure, StorageFull
from src.models import StorageEntry, ensure_tables, get_engine, get_session, sqlite_url
from src.protocol.codec import HashId, ImageHeader, SenderId

logger = logging.getLogger(__name__)

INDEX_NAME = "index.db"


def selector_matches(package_name: str, selector: str) -> bool:
    """Exact package name, or a glob such as "Sample PC*"."""
    return package_name == selector or fnmatch.fnmatchcase(package_name, selector)


def safe_segment(name: str) -> str:
    """Make a package, sender or file name usable as a single path segment."""
    cleaned = name.replace("/", "_").replace("\\", "_").replace("\x00", "_")
    if cleaned in ("", ".", ".."):
        cleaned = f"_{cleaned}"
    return cleaned


class ImageStore:
    def __init__(
        self,
        root: Path,
        *,
        database_url: Optional[str] = None,
        limit_bytes: Optional[int] = None,
    ) -> None:
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create storage dir {self.root}: {exc}") from exc
        self.engine = get_engine(database_url or sqlite_url(self.root / INDEX_NAME))
        ensure_tables(self.engine)
        self._session = get_session(self.engine)
        self.limit_bytes = limit_bytes
        self.used_bytes = int(self._session.query(func.coalesce(func.sum(StorageEntry.size), 0)).scalar())

    def find(self, hash_file: HashId, sender: SenderId) -> Optional[StorageEntry]:
        return (
            self._session.query(StorageEntry)
            .filter(StorageEntry.hash_file == hash_file.hex, StorageEntry.sender == sender.value)
            .one_or_none()
        )

    def has_room(self, nbytes: int, reserved: int = 0) -> bool:
        return self.limit_bytes is None or self.used_bytes + reserved + nbytes <= self.limit_bytes

    def entries(self, selector: str = "*") -> List[StorageEntry]:
        """Entries whose package name matches `selector` (exact name or glob)."""
        rows = (
            self._session.query(StorageEntry)
            .order_by(StorageEntry.sender, StorageEntry.package_name, StorageEntry.file_name, StorageEntry.id)
            .all()
        )
        return [row for row in rows if selector_matches(row.package_name, selector)]

    def path_of(self, entry: StorageEntry) -> Path:
        return self.root.joinpath(*PurePosixPath(entry.stored_path).parts)

    def read(self, entry: StorageEntry) -> bytes:
        try:
            return self.path_of(entry).read_bytes()
        except OSError as exc:
            raise IoFailure(f"cannot read {entry.stored_path}: {exc}") from exc

    def verify(self, entry: StorageEntry) -> bool:
        try:
            data = self.path_of(entry).read_bytes()
        except OSError:
            return False
        return hashlib.sha256(data).hexdigest() == entry.hash_file

    def store(self, image: bytes, header: ImageHeader, *, stored_at: float = 0.0) -> StorageEntry:
        """
        Write a restored image and index it.

        Returns the existing entry without writing when (hash_file, sender) is
        already stored. A second image with the same name from the same sender
        gets the hash appended to its file name instead of overwriting.
        """
        existing = self.find(header.hash_file, header.sender)
        if existing is not None:
            logger.debug("%s from %s already stored at %s", header.hash_file.short, header.sender, existing.stored_path)
            return existing
        if not self.has_room(len(image)):
            raise StorageFull(
                f"storing {len(image)} bytes would exceed the {self.limit_bytes}-byte limit "
                f"({self.used_bytes} used)"
            )

        relative = self._relative_path(header)
        target = self.root.joinpath(*relative.parts)
        tmp = target.with_name(target.name + ".part")
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp.write_bytes(image)
            os.replace(tmp, target)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            raise IoFailure(f"cannot write {target}: {exc}") from exc

        entry = StorageEntry(
            hash_file=header.hash_file.hex,
            sender=header.sender.value,
            package_name=header.package_name,
            file_name=header.file_name,
            stored_path=relative.as_posix(),
            size=len(image),
            stored_at=stored_at,
        )
        self._session.add(entry)
        try:
            self._session.commit()
        except IntegrityError:
            self._session.rollback()
            existing = self.find(header.hash_file, header.sender)
            if existing is not None:
                if existing.stored_path != entry.stored_path:
                    target.unlink(missing_ok=True)
                return existing
            raise
        except SQLAlchemyError as exc:
            self._session.rollback()
            target.unlink(missing_ok=True)
            raise IoFailure(f"cannot index {relative}: {exc}") from exc

        self.used_bytes += len(image)
        logger.info("stored %s (%d bytes) from %s", relative.as_posix(), len(image), header.sender)
        return entry

    def _relative_path(self, header: ImageHeader) -> PurePosixPath:
        folder = PurePosixPath(safe_segment(header.sender.value), safe_segment(header.package_name))
        name = safe_segment(header.file_name)
        candidate = folder / name
        if self._path_taken(candidate):
            stem, dot, suffix = name.partition(".")
            candidate = folder / (f"{stem}.{header.hash_file.short}{dot}{suffix}" if dot else f"{name}.{header.hash_file.short}")
        return candidate

    def _path_taken(self, relative: PurePosixPath) -> bool:
        return (
            self._session.query(StorageEntry.id).filter(StorageEntry.stored_path == relative.as_posix()).first()
            is not None
        )

    def close(self) -> None:
        self._session.close()
        self.engine.dispose()
