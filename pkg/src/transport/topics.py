"""
Topic names, MQTT wildcard matching, and the protocol's topic scheme.

    net/<receiver>/send_header                  headers toward a receiver
    net/<sender>/hash_sender                    acks and request results back to a sender
    net/<receiver>/hash_sender_orq/<sender>     fragments toward a receiver
    net/<orchestrator>/type_request             category requests
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Generic, Iterator, List, Optional, Tuple, TypeVar

from src.errors import InvariantViolation

ROOT = "net"
SEND_HEADER = "send_header"
HASH_SENDER = "hash_sender"
HASH_SENDER_ORQ = "hash_sender_orq"
TYPE_REQUEST = "type_request"

T = TypeVar("T")


def validate_topic(topic: str, *, allow_wildcards: bool = False) -> List[str]:
    """Split and check a topic name or subscription pattern."""
    if not isinstance(topic, str) or not topic:
        raise InvariantViolation("topic must be a non-empty string")
    segments = topic.split("/")
    for i, segment in enumerate(segments):
        if not segment:
            raise InvariantViolation(f"empty segment in topic {topic!r}")
        if "+" in segment or "#" in segment:
            if not allow_wildcards:
                raise InvariantViolation(f"wildcards are only allowed in subscriptions: {topic!r}")
            if segment not in ("+", "#"):
                raise InvariantViolation(f"wildcard must fill a whole segment: {topic!r}")
            if segment == "#" and i != len(segments) - 1:
                raise InvariantViolation(f"'#' must be the last segment: {topic!r}")
    return segments


def topic_matches(pattern: str, topic: str) -> bool:
    pat = validate_topic(pattern, allow_wildcards=True)
    name = validate_topic(topic)
    for i, segment in enumerate(pat):
        if segment == "#":
            return True
        if i >= len(name):
            return False
        if segment != "+" and segment != name[i]:
            return False
    return len(pat) == len(name)


@dataclass
class _TrieNode(Generic[T]):
    children: Dict[str, "_TrieNode[T]"] = field(default_factory=dict)
    values: Dict[object, T] = field(default_factory=dict)


class TopicTrie(Generic[T]):
    """Subscription index keyed by pattern segments; one value per (pattern, key)."""

    def __init__(self) -> None:
        self._root: _TrieNode[T] = _TrieNode()

    def insert(self, pattern: str, key: object, value: T) -> None:
        node = self._root
        for segment in validate_topic(pattern, allow_wildcards=True):
            node = node.children.setdefault(segment, _TrieNode())
        node.values[key] = value

    def remove(self, pattern: str, key: object) -> bool:
        node: Optional[_TrieNode[T]] = self._root
        for segment in validate_topic(pattern, allow_wildcards=True):
            node = node.children.get(segment) if node else None
            if node is None:
                return False
        return node.values.pop(key, None) is not None

    def match(self, topic: str) -> Iterator[T]:
        yield from self._walk(self._root, validate_topic(topic), 0)

    def _walk(self, node: _TrieNode[T], segments: List[str], depth: int) -> Iterator[T]:
        hash_child = node.children.get("#")
        if hash_child is not None:
            yield from hash_child.values.values()
        if depth == len(segments):
            yield from node.values.values()
            return
        for segment in (segments[depth], "+"):
            child = node.children.get(segment)
            if child is not None:
                yield from self._walk(child, segments, depth + 1)


def send_header_topic(receiver: str) -> str:
    return f"{ROOT}/{receiver}/{SEND_HEADER}"


def hash_sender_topic(sender: str) -> str:
    return f"{ROOT}/{sender}/{HASH_SENDER}"


def fragment_topic(receiver: str, sender: str) -> str:
    return f"{ROOT}/{receiver}/{HASH_SENDER_ORQ}/{sender}"


def fragment_subscription(receiver: str) -> str:
    return f"{ROOT}/{receiver}/{HASH_SENDER_ORQ}/+"


def type_request_topic(orchestrator: str) -> str:
    return f"{ROOT}/{orchestrator}/{TYPE_REQUEST}"


def topic_kind(topic: str) -> str:
    """Classify a protocol topic by its message stream (used for counters)."""
    segments = topic.split("/")
    if len(segments) >= 3 and segments[0] == ROOT:
        if segments[2] in (SEND_HEADER, HASH_SENDER, HASH_SENDER_ORQ, TYPE_REQUEST):
            return segments[2]
    return "other"


def fragment_sender(topic: str) -> Tuple[str, str]:
    """(receiver, sender) segments of a fragment topic."""
    segments = topic.split("/")
    if len(segments) != 4 or segments[0] != ROOT or segments[2] != HASH_SENDER_ORQ:
        raise InvariantViolation(f"not a fragment topic: {topic!r}")
    return segments[1], segments[3]
