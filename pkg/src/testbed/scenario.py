"""
Scenario configuration: a TOML document describing one experiment.

    id = "exp001"
    producers = 1
    seed = 7

    [package]
    image_count = 100
    image_size = "1MB"

    [[faults]]
    time = 120.0
    node = "orch"
    action = "down"

See docs/scenario-format.md for every key.
"""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.config import CHUNK_SIZE, MIB, ProtocolTimers, parse_rate, parse_size
from src.errors import ConfigError
from src.nodes.node import ORCHESTRATOR_ID, RecoveryPolicy
from src.transport.base import BROKER_ID, SessionMode


def producer_id(index: int) -> str:
    return f"PC{index}"


def _checked(parse, value):
    try:
        return parse(value)
    except ConfigError as exc:
        raise ValueError(str(exc)) from exc


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PackageSpec(_Strict):
    image_count: Optional[int] = Field(default=None, ge=1)
    image_size: Optional[int] = Field(default=None, ge=1)
    dataset_dir: Optional[Path] = None
    name_template: str = "Sample {node}"
    rounds: int = Field(default=1, ge=1)
    shared_dataset: bool = False

    @field_validator("image_size", mode="before")
    @classmethod
    def _size(cls, value):
        return None if value is None else _checked(parse_size, value)

    @model_validator(mode="after")
    def _source(self) -> "PackageSpec":
        if self.dataset_dir is None and (self.image_count is None or self.image_size is None):
            raise ValueError("package needs image_count and image_size, or dataset_dir")
        return self

    def package_name(self, node: str, index: int) -> str:
        return self.name_template.format(node=node, index=index)

    @property
    def image_mb(self) -> float:
        return (self.image_size or 0) / MIB


class FaultEvent(_Strict):
    time: float = Field(ge=0)
    node: str
    action: Literal["down", "up"]


class TrafficSpec(_Strict):
    start: float = Field(default=0.0, ge=0)
    duration: float = Field(gt=0)
    rate: float
    parallel_streams: int = Field(default=1, ge=1)
    packet_size: int = Field(default=131072, ge=1)
    target: str = BROKER_ID

    @field_validator("rate", mode="before")
    @classmethod
    def _rate(cls, value):
        return _checked(parse_rate, value)


class HybridRequestSpec(_Strict):
    requester: str
    selector: str = Field(min_length=1)
    # None: issue once every producer has drained its package.
    at: Optional[float] = Field(default=None, ge=0)


class NetworkSpec(_Strict):
    producer_bps: float = 10e6
    orchestrator_bps: float = 1e9
    broker_bps: float = 1e9
    latency_ms: float = Field(default=1.0, ge=0)

    @field_validator("producer_bps", "orchestrator_bps", "broker_bps", mode="before")
    @classmethod
    def _rate(cls, value):
        return _checked(parse_rate, value)


class ExpectSpec(_Strict):
    restored: Optional[int] = Field(default=None, ge=0)
    restored_below_total: Optional[bool] = None
    duplicates_min: Optional[int] = Field(default=None, ge=0)
    retrieved_per_request: Optional[int] = Field(default=None, ge=0)


class ScenarioConfig(_Strict):
    id: str = Field(min_length=1)
    description: str = ""
    producers: int = Field(ge=1)
    hybrids: int = Field(default=0, ge=0)
    package: PackageSpec
    chunk_size: int = CHUNK_SIZE
    session_mode: SessionMode = SessionMode.PERSISTENT
    recovery: Optional[RecoveryPolicy] = None
    qos: Literal[0, 1] = 1
    faults: List[FaultEvent] = Field(default_factory=list)
    traffic: List[TrafficSpec] = Field(default_factory=list)
    hybrid_requests: List[HybridRequestSpec] = Field(default_factory=list)
    seed: int = Field(default=0, ge=0, lt=2**64)
    timers: Dict[str, float] = Field(default_factory=dict)
    network: NetworkSpec = NetworkSpec()
    storage_limit_bytes: Optional[int] = None
    max_time_s: float = Field(default=86_400.0, gt=0)
    expect: ExpectSpec = ExpectSpec()

    @field_validator("chunk_size", mode="before")
    @classmethod
    def _chunk(cls, value):
        return _checked(parse_size, value)

    @field_validator("storage_limit_bytes", mode="before")
    @classmethod
    def _limit(cls, value):
        return None if value is None else _checked(parse_size, value)

    @model_validator(mode="after")
    def _consistency(self) -> "ScenarioConfig":
        if self.hybrids > self.producers:
            raise ValueError("hybrids cannot outnumber producers")
        known = {ORCHESTRATOR_ID, BROKER_ID, *self.node_ids}
        last_time = 0.0
        down: Dict[str, bool] = {}
        for event in self.faults:
            if event.node not in known:
                raise ValueError(f"fault on unknown node {event.node!r}")
            if event.time < last_time:
                raise ValueError("fault times must be non-decreasing")
            last_time = event.time
            going_down = event.action == "down"
            if down.get(event.node, False) == going_down:
                raise ValueError(f"faults for {event.node} must alternate down/up, starting with down")
            down[event.node] = going_down
        for spec in self.traffic:
            if spec.target not in known:
                raise ValueError(f"traffic aimed at unknown node {spec.target!r}")
        hybrids = set(self.node_ids[: self.hybrids])
        for request in self.hybrid_requests:
            if request.requester not in hybrids:
                raise ValueError(f"{request.requester!r} is not a hybrid node")
        try:
            self.protocol_timers()
        except ConfigError as exc:
            raise ValueError(str(exc)) from exc
        return self

    @property
    def node_ids(self) -> List[str]:
        return [producer_id(i) for i in range(1, self.producers + 1)]

    @property
    def recovery_policy(self) -> RecoveryPolicy:
        if self.recovery is not None:
            return self.recovery
        if self.session_mode is SessionMode.CLEAN:
            return RecoveryPolicy.PAPER_FAITHFUL
        return RecoveryPolicy.RESILIENT

    def protocol_timers(self) -> ProtocolTimers:
        allowed = set(ProtocolTimers.__dataclass_fields__)
        unknown = set(self.timers) - allowed
        if unknown:
            raise ConfigError(f"unknown timer override(s): {', '.join(sorted(unknown))}")
        values = {
            name: int(value) if name.startswith("max_") else float(value) for name, value in self.timers.items()
        }
        return ProtocolTimers(**values)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return self.model_validate({**self.model_dump(), "seed": seed})


def load_scenario(path: Path) -> ScenarioConfig:
    """Read and validate a scenario file; every failure surfaces as ConfigError."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: not valid TOML: {exc}") from exc
    return parse_scenario(raw, source=str(path))


def parse_scenario(raw: dict, *, source: str = "<scenario>") -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: invalid scenario:\n{exc}") from exc
