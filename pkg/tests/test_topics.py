import pytest

from src.errors import InvariantViolation
from src.transport.topics import (
    TopicTrie,
    fragment_sender,
    fragment_subscription,
    fragment_topic,
    hash_sender_topic,
    send_header_topic,
    topic_kind,
    topic_matches,
    type_request_topic,
    validate_topic,
)


def test_protocol_topic_names():
    assert send_header_topic("orch") == "net/orch/send_header"
    assert hash_sender_topic("PC1") == "net/PC1/hash_sender"
    assert fragment_topic("orch", "PC1") == "net/orch/hash_sender_orq/PC1"
    assert fragment_subscription("orch") == "net/orch/hash_sender_orq/+"
    assert type_request_topic("orch") == "net/orch/type_request"


@pytest.mark.parametrize(
    "pattern, topic, expected",
    [
        ("net/orch/hash_sender_orq/+", "net/orch/hash_sender_orq/PC1", True),
        ("net/orch/hash_sender_orq/+", "net/orch/hash_sender_orq", False),
        ("net/orch/hash_sender_orq/+", "net/PC1/hash_sender_orq/PC2", False),
        ("net/#", "net/PC1/hash_sender", True),
        ("net/PC1/#", "net/PC1", True),
        ("net/+/send_header", "net/orch/send_header", True),
        ("net/orch/send_header", "net/orch/send_header/x", False),
    ],
)
def test_topic_matches(pattern, topic, expected):
    assert topic_matches(pattern, topic) is expected


@pytest.mark.parametrize("bad", ["", "net//x", "net/#/x", "net/a+b", "net/+"])
def test_validate_rejects_bad_topics(bad):
    with pytest.raises(InvariantViolation):
        validate_topic(bad)


def test_wildcards_only_in_subscriptions():
    assert validate_topic("net/+/x/#", allow_wildcards=True) == ["net", "+", "x", "#"]
    with pytest.raises(InvariantViolation):
        validate_topic("net/x#", allow_wildcards=True)


def test_trie_matches_like_topic_matches():
    trie = TopicTrie()
    trie.insert("net/orch/hash_sender_orq/+", "orch", "fragments")
    trie.insert("net/orch/send_header", "orch", "headers")
    trie.insert("net/#", "spy", "everything")
    assert sorted(trie.match("net/orch/hash_sender_orq/PC3")) == ["everything", "fragments"]
    assert sorted(trie.match("net/orch/send_header")) == ["everything", "headers"]
    assert trie.remove("net/#", "spy")
    assert not trie.remove("net/#", "spy")
    assert list(trie.match("net/PC1/hash_sender")) == []


def test_fragment_sender_and_kind():
    assert fragment_sender("net/orch/hash_sender_orq/PC7") == ("orch", "PC7")
    with pytest.raises(InvariantViolation):
        fragment_sender("net/orch/send_header")
    assert topic_kind("net/PC1/hash_sender") == "hash_sender"
    assert topic_kind("other/topic") == "other"
