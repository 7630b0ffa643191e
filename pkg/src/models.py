"""
SQLAlchemy models shared across the project.
"""

from __future__ import annotations

from pathlib import Path

from sqlalchemy import Column, Float, Integer, String, UniqueConstraint, create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session, declarative_base

from src.errors import IoFailure
from src.protocol.codec import HashId, SenderId

Base = declarative_base()


class StorageEntry(Base):
    __tablename__ = "storage_entries"
    __table_args__ = (
        UniqueConstraint("hash_file", "sender", name="uq_storage_entries_hash_sender"),
        UniqueConstraint("stored_path", name="uq_storage_entries_stored_path"),
    )

    id = Column(Integer, primary_key=True, autoincrement=True)
    hash_file = Column(String(64), nullable=False)
    sender = Column(String(128), nullable=False)
    package_name = Column(String, nullable=False)
    file_name = Column(String, nullable=False)
    # Relative to the store root, '/'-separated.
    stored_path = Column(String, nullable=False)
    size = Column(Integer, nullable=False)
    stored_at = Column(Float, nullable=False, default=0.0)

    @property
    def hash_id(self) -> HashId:
        return HashId.from_hex(self.hash_file)

    @property
    def sender_id(self) -> SenderId:
        return SenderId(self.sender)

    def __repr__(self) -> str:
        return f"StorageEntry({self.sender}/{self.package_name}/{self.file_name} {self.hash_file[:12]})"


def sqlite_url(path: Path) -> str:
    return f"sqlite:///{Path(path).resolve()}"


def get_engine(url: str) -> Engine:
    """Create the engine backing one storage index."""
    try:
        return create_engine(url)
    except SQLAlchemyError as exc:
        raise IoFailure(f"cannot open storage index {url}: {exc}") from exc


def ensure_tables(engine: Engine) -> None:
    """
    Create tables for defined models if they do not already exist.
    """
    try:
        Base.metadata.create_all(engine, tables=[StorageEntry.__table__])
    except SQLAlchemyError as exc:
        raise IoFailure(f"cannot create storage tables: {exc}") from exc


def get_session(engine: Engine) -> Session:
    """
    Session bound to `engine`; returned rows stay readable after commit.
    """
    return Session(bind=engine, expire_on_commit=False)
