"""
Configuration helpers for node directories, broker settings and protocol timers.

Loads environment variables from a .env file in the project root.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from src.errors import ConfigError

load_dotenv()

LOG_LEVEL = os.getenv("CHUNKRELAY_LOG", "info")
# Base directory for node work dirs created by the `node` command.
HOME_DIR = Path(os.getenv("CHUNKRELAY_HOME", "data"))
# Optional SQLAlchemy URL for a real-broker orchestrator's storage index.
DATABASE_URL: Optional[str] = os.getenv("CHUNKRELAY_DATABASE_URL") or None

MQTT_HOST = os.getenv("MQTT_HOST", "127.0.0.1")
MQTT_PORT = int(os.getenv("MQTT_PORT", "1883"))
MQTT_KEEPALIVE = int(os.getenv("MQTT_KEEPALIVE", "60"))

KIB = 1024
MIB = 1024 * KIB
GIB = 1024 * MIB

CHUNK_SIZE = int(os.getenv("CHUNK_SIZE", str(256 * KIB)))
_storage_limit = os.getenv("STORAGE_LIMIT_BYTES")
STORAGE_LIMIT_BYTES: Optional[int] = int(_storage_limit) if _storage_limit else None
SPILL_THRESHOLD_BYTES = int(os.getenv("SPILL_THRESHOLD_BYTES", str(64 * MIB)))

_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([KMG]?i?B?)?\s*$", re.IGNORECASE)
_SIZE_UNITS = {"": 1, "B": 1, "K": KIB, "M": MIB, "G": GIB}


def parse_size(value: str | int) -> int:
    """
    Parse "2MB", "256KiB", "5242880" or an int into a byte count.

    Suffixes are binary multiples: 1 MB == 1,048,576 bytes.
    """
    if isinstance(value, int) and not isinstance(value, bool):
        if value < 1:
            raise ConfigError(f"size must be >= 1, got {value}")
        return value
    match = _SIZE_RE.match(str(value).replace("_", ""))
    if not match:
        raise ConfigError(f"Unparseable size: {value!r}")
    number, unit = match.groups()
    unit = (unit or "").upper()[:1]
    size = int(float(number) * _SIZE_UNITS[unit])
    if size < 1:
        raise ConfigError(f"size must be >= 1, got {value!r}")
    return size


@dataclass(frozen=True)
class ProtocolTimers:
    """Timer defaults for senders and receivers, in simulated (or wall) seconds."""

    header_retry_s: float = 5.0
    max_header_retries: int = 10
    watchdog_s: float = 10.0
    max_assembly_rounds: int = 20
    inter_send_min_s: float = 0.1
    inter_send_max_s: float = 2.0
    request_timeout_s: float = 60.0
    completion_probe_s: float = 30.0

    def __post_init__(self) -> None:
        if self.header_retry_s <= 0 or self.watchdog_s <= 0:
            raise ConfigError("timer periods must be positive")
        if self.max_header_retries < 0 or self.max_assembly_rounds < 1:
            raise ConfigError("retry budgets out of range")
        if not 0 <= self.inter_send_min_s <= self.inter_send_max_s:
            raise ConfigError("inter-send delay range is inverted")
        if self.request_timeout_s <= 0 or self.completion_probe_s <= 0:
            raise ConfigError("request_timeout_s and completion_probe_s must be positive")


DEFAULT_TIMERS = ProtocolTimers()


_RATE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([kKmMgG]?)(?:bps|bit/s)?\s*$")
_RATE_UNITS = {"": 1, "K": 1e3, "M": 1e6, "G": 1e9}


def parse_rate(value: str | float | int) -> float:
    """Parse "500Mbps", "10M" or a number into bits per second (decimal multiples)."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        rate = float(value)
    else:
        match = _RATE_RE.match(str(value).replace("_", ""))
        if not match:
            raise ConfigError(f"Unparseable rate: {value!r}")
        number, unit = match.groups()
        rate = float(number) * _RATE_UNITS[unit.upper()]
    if rate <= 0:
        raise ConfigError(f"rate must be > 0, got {value!r}")
    return rate
