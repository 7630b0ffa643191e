"""
Protocol message types and their wire encodings.

Control messages (header, ack, category request, request result) are canonical
JSON: fixed key order, no insignificant whitespace, UTF-8. Fragments use a
fixed big-endian binary layout:

    magic u32 | version u8 | hash_file 32B | part_index u32 | total_parts u32
    | payload_len u32 | payload_crc u32 | payload

Every decoder raises a `ChunkRelayError` subclass on bad input and nothing else.
"""

from __future__ import annotations

import enum
import json
import re
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple, Union

from src.errors import ChecksumMismatch, InvariantViolation, MalformedMessage

HASH_BYTES = 32
MAX_SENDER_BYTES = 128
FRAGMENT_MAGIC = 0x43524C59
FRAGMENT_VERSION = 1
_FRAGMENT_HEAD = struct.Struct(">IB32sIIII")
FRAGMENT_HEADER_SIZE = _FRAGMENT_HEAD.size  # 53

HEADER_KEYS = ("hash_file", "sender", "package", "file", "size", "parts", "chunk", "annotations")
ACK_KEYS = ("hash_file", "kind", "missing")
REQUEST_KEYS = ("requester", "selector")
RESULT_KEYS = ("selector", "count")

_HEX_RE = re.compile(r"^[0-9a-f]{64}$")
_FORBIDDEN_SENDER_CHARS = frozenset("/#+")


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True, order=True)
class HashId:
    """SHA-256 digest identifying one image transfer."""

    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, (bytes, bytearray)) or len(self.value) != HASH_BYTES:
            raise InvariantViolation("hash_file must be exactly 32 bytes")
        object.__setattr__(self, "value", bytes(self.value))

    @classmethod
    def from_hex(cls, text: str) -> "HashId":
        if not isinstance(text, str) or not _HEX_RE.match(text):
            raise InvariantViolation(f"hash_file must be 64 lowercase hex chars, got {text!r}")
        return cls(bytes.fromhex(text))

    @property
    def hex(self) -> str:
        return self.value.hex()

    @property
    def short(self) -> str:
        return self.value.hex()[:12]

    def __str__(self) -> str:
        return self.hex


@dataclass(frozen=True, order=True)
class SenderId:
    """Node identity; usable verbatim as a topic segment."""

    value: str

    def __post_init__(self) -> None:
        if not isinstance(self.value, str) or not self.value:
            raise InvariantViolation("sender id must be a non-empty string")
        try:
            encoded = self.value.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise InvariantViolation(f"sender id is not valid UTF-8: {exc}") from exc
        if len(encoded) > MAX_SENDER_BYTES:
            raise InvariantViolation(f"sender id longer than {MAX_SENDER_BYTES} bytes")
        if _FORBIDDEN_SENDER_CHARS.intersection(self.value):
            raise InvariantViolation(f"sender id {self.value!r} contains '/', '#' or '+'")

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class ImageHeader:
    hash_file: HashId
    sender: SenderId
    package_name: str
    file_name: str
    file_size: int
    total_parts: int
    chunk_size: int
    annotations: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("file_size", "total_parts", "chunk_size"):
            value = getattr(self, name)
            if not _is_int(value) or value < 1:
                raise InvariantViolation(f"{name} must be an integer >= 1, got {value!r}")
        if self.total_parts != ceil_div(self.file_size, self.chunk_size):
            raise InvariantViolation(
                f"parts={self.total_parts} but ceil(size={self.file_size} / chunk={self.chunk_size}) "
                f"= {ceil_div(self.file_size, self.chunk_size)}"
            )
        if not isinstance(self.file_name, str) or not self.file_name:
            raise InvariantViolation("file_name must be non-empty")
        if not isinstance(self.package_name, str):
            raise InvariantViolation("package_name must be a string")
        if not all(isinstance(k, str) and isinstance(v, str) for k, v in self.annotations.items()):
            raise InvariantViolation("annotations must map strings to strings")

    def expected_payload_len(self, part_index: int) -> int:
        if part_index < self.total_parts - 1:
            return self.chunk_size
        return self.file_size - self.chunk_size * (self.total_parts - 1)


@dataclass(frozen=True)
class Fragment:
    hash_file: HashId
    part_index: int
    total_parts: int
    payload: bytes
    payload_crc: int

    def __post_init__(self) -> None:
        if not _is_int(self.total_parts) or self.total_parts < 1:
            raise InvariantViolation(f"total_parts must be >= 1, got {self.total_parts!r}")
        if not _is_int(self.part_index) or not 0 <= self.part_index < self.total_parts:
            raise InvariantViolation(f"part_index {self.part_index} outside [0, {self.total_parts})")

    @classmethod
    def build(cls, hash_file: HashId, part_index: int, total_parts: int, payload: bytes) -> "Fragment":
        payload = bytes(payload)
        return cls(hash_file, part_index, total_parts, payload, crc32(payload))


class AckKind(str, enum.Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    MISSING_PARTS = "missing"
    COMPLETED = "completed"


@dataclass(frozen=True)
class AckMessage:
    hash_file: HashId
    kind: AckKind
    missing: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "missing", tuple(self.missing))
        if self.kind is AckKind.MISSING_PARTS and not self.missing:
            raise InvariantViolation("missing-parts ack needs at least one index")
        if self.kind is not AckKind.MISSING_PARTS and self.missing:
            raise InvariantViolation(f"{self.kind.value} ack must not list missing parts")
        if any(not _is_int(i) or i < 0 for i in self.missing):
            raise InvariantViolation("missing indices must be non-negative integers")
        if list(self.missing) != sorted(set(self.missing)):
            raise InvariantViolation("missing indices must be sorted and unique")


@dataclass(frozen=True)
class CategoryRequest:
    requester: SenderId
    package_selector: str

    def __post_init__(self) -> None:
        if not isinstance(self.package_selector, str) or not self.package_selector:
            raise InvariantViolation("selector must be non-empty")


@dataclass(frozen=True)
class RequestResult:
    """Orchestrator's answer to a category request: how many transfers follow."""

    package_selector: str
    count: int

    def __post_init__(self) -> None:
        if not isinstance(self.package_selector, str) or not self.package_selector:
            raise InvariantViolation("selector must be non-empty")
        if not _is_int(self.count) or self.count < 0:
            raise InvariantViolation("count must be a non-negative integer")


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _dumps(obj: Dict[str, Any]) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _reject_duplicate_keys(pairs: list) -> Dict[str, Any]:
    result: Dict[str, Any] = {}
    for key, value in pairs:
        if key in result:
            raise MalformedMessage(f"duplicate key {key!r}")
        result[key] = value
    return result


def _loads_object(data: bytes, keys: Tuple[str, ...]) -> Dict[str, Any]:
    try:
        text = bytes(data).decode("utf-8")
        obj = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except MalformedMessage:
        raise
    except (UnicodeDecodeError, ValueError, RecursionError, TypeError) as exc:
        raise MalformedMessage(f"not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedMessage("expected a JSON object")
    try:
        _dumps(obj)
    except UnicodeEncodeError as exc:
        raise MalformedMessage(f"unpaired surrogate in message: {exc}") from exc
    if set(obj) != set(keys):
        missing = [k for k in keys if k not in obj]
        extra = [k for k in obj if k not in keys]
        raise MalformedMessage(f"bad keys: missing={missing} extra={extra}")
    return obj


def _field(obj: Dict[str, Any], key: str, kind: type) -> Any:
    value = obj[key]
    if kind is int:
        if not _is_int(value):
            raise MalformedMessage(f"{key} must be an integer")
    elif not isinstance(value, kind):
        raise MalformedMessage(f"{key} must be {kind.__name__}")
    return value


# Header.


def encode_header(h: ImageHeader) -> bytes:
    return _dumps(
        {
            "hash_file": h.hash_file.hex,
            "sender": h.sender.value,
            "package": h.package_name,
            "file": h.file_name,
            "size": h.file_size,
            "parts": h.total_parts,
            "chunk": h.chunk_size,
            "annotations": dict(h.annotations),
        }
    )


def decode_header(data: bytes) -> ImageHeader:
    obj = _loads_object(data, HEADER_KEYS)
    annotations = _field(obj, "annotations", dict)
    return ImageHeader(
        hash_file=HashId.from_hex(_field(obj, "hash_file", str)),
        sender=SenderId(_field(obj, "sender", str)),
        package_name=_field(obj, "package", str),
        file_name=_field(obj, "file", str),
        file_size=_field(obj, "size", int),
        total_parts=_field(obj, "parts", int),
        chunk_size=_field(obj, "chunk", int),
        annotations=dict(annotations),
    )


def peek_header_identity(data: bytes) -> Optional[Tuple[HashId, SenderId]]:
    """Best-effort (hash_file, sender) from a header that may fail validation."""
    try:
        obj = json.loads(bytes(data).decode("utf-8"))
        return HashId.from_hex(obj["hash_file"]), SenderId(obj["sender"])
    except Exception:
        return None


# Fragment.


def encode_fragment(f: Fragment) -> bytes:
    head = _FRAGMENT_HEAD.pack(
        FRAGMENT_MAGIC,
        FRAGMENT_VERSION,
        f.hash_file.value,
        f.part_index,
        f.total_parts,
        len(f.payload),
        f.payload_crc,
    )
    return head + f.payload


def decode_fragment(data: bytes) -> Fragment:
    data = bytes(data)
    if len(data) < FRAGMENT_HEADER_SIZE:
        raise MalformedMessage(f"fragment buffer too short ({len(data)} bytes)")
    magic, version, digest, index, total, length, crc = _FRAGMENT_HEAD.unpack_from(data)
    if magic != FRAGMENT_MAGIC:
        raise MalformedMessage(f"bad fragment magic 0x{magic:08x}")
    if version != FRAGMENT_VERSION:
        raise MalformedMessage(f"unsupported fragment version {version}")
    payload = data[FRAGMENT_HEADER_SIZE:]
    if len(payload) != length:
        raise MalformedMessage(f"payload_len {length} but {len(payload)} bytes follow")
    if crc32(payload) != crc:
        raise ChecksumMismatch(f"crc mismatch on part {index}")
    return Fragment(HashId(digest), index, total, payload, crc)


# Ack.


def encode_ack(a: AckMessage) -> bytes:
    return _dumps({"hash_file": a.hash_file.hex, "kind": a.kind.value, "missing": list(a.missing)})


def decode_ack(data: bytes) -> AckMessage:
    obj = _loads_object(data, ACK_KEYS)
    kind_text = _field(obj, "kind", str)
    try:
        kind = AckKind(kind_text)
    except ValueError as exc:
        raise MalformedMessage(f"unknown ack kind {kind_text!r}") from exc
    missing = _field(obj, "missing", list)
    return AckMessage(HashId.from_hex(_field(obj, "hash_file", str)), kind, tuple(missing))


# Category request and its result notice.


def encode_request(r: CategoryRequest) -> bytes:
    return _dumps({"requester": r.requester.value, "selector": r.package_selector})


def decode_request(data: bytes) -> CategoryRequest:
    obj = _loads_object(data, REQUEST_KEYS)
    return CategoryRequest(SenderId(_field(obj, "requester", str)), _field(obj, "selector", str))


def encode_request_result(r: RequestResult) -> bytes:
    return _dumps({"selector": r.package_selector, "count": r.count})


def decode_request_result(data: bytes) -> RequestResult:
    obj = _loads_object(data, RESULT_KEYS)
    return RequestResult(_field(obj, "selector", str), _field(obj, "count", int))


def decode_control(data: bytes) -> Union[AckMessage, RequestResult]:
    """Decode a message from a hash_sender topic, which carries acks and request results."""
    try:
        return decode_ack(data)
    except MalformedMessage as ack_error:
        try:
            return decode_request_result(data)
        except MalformedMessage:
            raise ack_error
