"""
Scenario execution on the simulated broker.

`run_scenario` builds the topology, queues every producer's package, applies
faults and background traffic, runs to quiescence, issues deferred hybrid
requests in a second phase, then verifies every stored image by hash.
"""

from __future__ import annotations

import hashlib
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Set

from src.errors import ConfigError, IoFailure, VerificationFailure
from src.nodes.metrics import OUTCOME_COMPLETED, MetricsCounters, TransferRecord
from src.nodes.node import ORCHESTRATOR_ID, HybridNode, OrchestratorNode, ProducerNode, RetrievalRequest
from src.testbed.dataset import dataset_files, derive_seed, generate_dataset, read_manifest
from src.testbed.scenario import ScenarioConfig
from src.transport.shaping import TrafficProfile
from src.transport.simulator import SimBroker, TransportStats

logger = logging.getLogger(__name__)


@dataclass
class NodeReport:
    node: str
    role: str
    metrics: MetricsCounters
    makespan_s: Optional[float] = None
    retrieval_s: Optional[float] = None
    retrieved: Optional[int] = None


@dataclass
class MetricsReport:
    scenario_id: str
    producers: int
    image_count: int
    image_size: int
    nodes: List[NodeReport]
    transfers: List[TransferRecord]
    restored: int
    makespan_s: float
    downtime_s: float
    end_s: float
    events: int
    trace_digest: str
    stats: TransportStats
    verified: int = 0
    images_begun: int = 0
    verification_failures: List[str] = field(default_factory=list)
    expectation_failures: List[str] = field(default_factory=list)
    retrievals: Dict[str, List[int]] = field(default_factory=dict)

    def total(self, counter: str) -> int:
        return sum(getattr(n.metrics, counter) for n in self.nodes)

    @property
    def sent(self) -> int:
        return self.total("files_sent")

    @property
    def received(self) -> int:
        return self.total("files_received")

    @property
    def duplicates(self) -> int:
        return self.total("duplicates_received")

    @property
    def node_makespans(self) -> Dict[str, float]:
        return {n.node: n.makespan_s for n in self.nodes if n.makespan_s is not None}

    @property
    def ok(self) -> bool:
        return not self.verification_failures and not self.expectation_failures


def downtime_seconds(cfg: ScenarioConfig) -> float:
    """Sum of every node's down intervals; an interval left open ends at max_time_s."""
    total = 0.0
    down_since: Dict[str, float] = {}
    for event in cfg.faults:
        if event.action == "down":
            down_since[event.node] = event.time
        else:
            total += event.time - down_since.pop(event.node)
    total += sum(cfg.max_time_s - start for start in down_since.values())
    return total


def _producer_makespan(records: List[TransferRecord], node: str) -> Optional[float]:
    mine = [r for r in records if r.sender == node and r.start_s is not None]
    done = [r.end_s for r in mine if r.outcome == OUTCOME_COMPLETED and r.end_s is not None]
    if not mine or not done:
        return None
    return max(done) - min(r.start_s for r in mine)


def _prepare_datasets(cfg: ScenarioConfig, work_dir: Path) -> Dict[str, Path]:
    package = cfg.package
    if package.dataset_dir is not None:
        if not package.dataset_dir.is_dir():
            raise ConfigError(f"dataset_dir {package.dataset_dir} does not exist")
        return {node: package.dataset_dir for node in cfg.node_ids}
    root = work_dir / "datasets"
    labels = {node: ("shared" if package.shared_dataset else node) for node in cfg.node_ids}
    directories: Dict[str, Path] = {}
    for label in sorted(set(labels.values())):
        directory = root / label
        if not _dataset_matches(directory, package.image_count, package.image_size):
            generate_dataset(derive_seed(cfg.seed, label), package.image_count, package.image_size, directory)
        directories[label] = directory
    return {node: directories[label] for node, label in labels.items()}


def _dataset_matches(directory: Path, count: int, size: int) -> bool:
    try:
        manifest = read_manifest(directory)
    except (IoFailure, ValueError, KeyError):
        return False
    return len(manifest) == count and bool((manifest["size"] == size).all())


def run_scenario(cfg: ScenarioConfig, work_dir: Path) -> MetricsReport:
    work_dir = Path(work_dir)
    nodes_dir = work_dir / "nodes"
    shutil.rmtree(nodes_dir, ignore_errors=True)
    datasets = _prepare_datasets(cfg, work_dir)
    files = {node: dataset_files(directory) for node, directory in datasets.items()}
    timers = cfg.protocol_timers()
    policy = cfg.recovery_policy
    logger.info(
        "%s: %d producer(s), %s session, %s recovery, seed %d",
        cfg.id,
        cfg.producers,
        cfg.session_mode.value,
        policy.value,
        cfg.seed,
    )

    broker = SimBroker(
        session_mode=cfg.session_mode,
        default_capacity_bps=cfg.network.producer_bps,
        default_latency_ms=cfg.network.latency_ms,
        broker_capacity_bps=cfg.network.broker_bps,
    )
    broker.add_link(ORCHESTRATOR_ID, cfg.network.orchestrator_bps)
    common = dict(policy=policy, timers=timers, seed=cfg.seed, chunk_size=cfg.chunk_size, qos=cfg.qos)
    orchestrator = OrchestratorNode(
        ORCHESTRATOR_ID, broker, nodes_dir / ORCHESTRATOR_ID, storage_limit_bytes=cfg.storage_limit_bytes, **common
    )
    producers: List[ProducerNode] = []
    for index, node_id in enumerate(cfg.node_ids, start=1):
        cls = HybridNode if index <= cfg.hybrids else ProducerNode
        producers.append(cls(node_id, broker, nodes_dir / node_id, orchestrator=ORCHESTRATOR_ID, **common))

    orchestrator.start()
    for producer in producers:
        producer.start()
    for spec in cfg.traffic:
        broker.add_background_traffic(
            TrafficProfile(spec.start, spec.duration, spec.rate, spec.parallel_streams, spec.packet_size, spec.target)
        )
    for event in cfg.faults:
        broker.set_link(event.node, event.action == "up", at=event.time)

    for index, producer in enumerate(producers, start=1):
        package_name = cfg.package.package_name(producer.node_id, index)
        producer.queue_package(list(files[producer.node_id].values()), package_name, rounds=cfg.package.rounds)

    by_id = {p.node_id: p for p in producers}
    requests: Dict[str, List[RetrievalRequest]] = {}

    def issue(requester: str, selector: str) -> None:
        hybrid = by_id[requester]
        assert isinstance(hybrid, HybridNode)
        requests.setdefault(requester, []).append(hybrid.request(selector))

    deferred = []
    for spec in cfg.hybrid_requests:
        if spec.at is None:
            deferred.append(spec)
        else:
            broker.loop.call_at(
                spec.at, f"request {spec.requester}", lambda s=spec: issue(s.requester, s.selector)
            )

    events = broker.run_to_quiescence(cfg.max_time_s)
    if deferred:
        logger.info("%s: production drained at t=%.3f, issuing %d request(s)", cfg.id, broker.now(), len(deferred))
        for spec in deferred:
            issue(spec.requester, spec.selector)
        events += broker.run_to_quiescence(cfg.max_time_s)

    first_files = next(iter(files.values()))
    image_count = len(first_files)
    image_size = cfg.package.image_size or max((p.stat().st_size for p in first_files.values()), default=0)
    report = _build_report(cfg, broker, orchestrator, producers, requests, events, image_count, image_size)
    try:
        _verify(report, orchestrator, producers, datasets)
    finally:
        for node in (orchestrator, *producers):
            node.close()
    _check_expectations(cfg, report)
    logger.info(
        "%s: restored %d, sent %d, received %d, duplicates %d, makespan %.3f s",
        cfg.id,
        report.restored,
        report.sent,
        report.received,
        report.duplicates,
        report.makespan_s,
    )
    if report.verification_failures:
        raise VerificationFailure(
            f"{cfg.id}: {len(report.verification_failures)} stored image(s) failed verification", report
        )
    return report


def _build_report(
    cfg: ScenarioConfig,
    broker: SimBroker,
    orchestrator: OrchestratorNode,
    producers: List[ProducerNode],
    requests: Dict[str, List[RetrievalRequest]],
    events: int,
    image_count: int,
    image_size: int,
) -> MetricsReport:
    transfers: List[TransferRecord] = []
    nodes: List[NodeReport] = []
    for producer in producers:
        transfers.extend(producer.metrics.transfers)
    transfers.extend(orchestrator.metrics.transfers)
    for producer in producers:
        node = NodeReport(producer.node_id, producer.role, producer.metrics, _producer_makespan(transfers, producer.node_id))
        mine = requests.get(producer.node_id, [])
        if mine:
            finished = [r.completed_s - r.issued_s for r in mine if r.completed_s is not None]
            node.retrieval_s = max(finished) if len(finished) == len(mine) else None
            node.retrieved = sum(len(r.entries) for r in mine)
        nodes.append(node)
    nodes.append(NodeReport(orchestrator.node_id, orchestrator.role, orchestrator.metrics))

    first = [n.metrics.first_header_s for n in nodes if n.metrics.first_header_s is not None]
    last = [n.metrics.last_restore_s for n in nodes if n.metrics.last_restore_s is not None]
    makespan = max(last) - min(first) if first and last else 0.0
    return MetricsReport(
        scenario_id=cfg.id,
        producers=cfg.producers,
        image_count=image_count,
        image_size=image_size,
        nodes=nodes,
        transfers=transfers,
        restored=orchestrator.metrics.images_restored,
        makespan_s=makespan,
        downtime_s=downtime_seconds(cfg),
        end_s=broker.now(),
        events=events,
        trace_digest=broker.trace_digest(),
        stats=broker.stats,
        images_begun=sum(p.metrics.transfers_begun for p in producers),
        retrievals={node: [len(r.entries) for r in reqs] for node, reqs in requests.items()},
    )


def _expected_hashes(datasets: Dict[str, Path]) -> Set[str]:
    hashes: Set[str] = set()
    for directory in set(datasets.values()):
        try:
            hashes.update(read_manifest(directory)["sha256"])
        except IoFailure:
            for path in dataset_files(directory).values():
                hashes.add(hashlib.sha256(path.read_bytes()).hexdigest())
    return hashes


def _verify(
    report: MetricsReport,
    orchestrator: OrchestratorNode,
    producers: List[ProducerNode],
    datasets: Dict[str, Path],
) -> None:
    """Every stored image must hash to its key and come from some generated dataset."""
    expected = _expected_hashes(datasets)
    stores = [(orchestrator.node_id, orchestrator.store)]
    stores.extend((p.node_id, p.store) for p in producers if isinstance(p, HybridNode))
    for node, store in stores:
        for entry in store.entries():
            if not store.verify(entry):
                report.verification_failures.append(f"{node}: {entry.stored_path} does not hash to {entry.hash_file}")
            elif entry.hash_file not in expected:
                report.verification_failures.append(f"{node}: {entry.stored_path} matches no dataset image")
            else:
                report.verified += 1


def _check_expectations(cfg: ScenarioConfig, report: MetricsReport) -> None:
    expect = cfg.expect
    offered = cfg.producers * report.image_count * cfg.package.rounds
    failures = report.expectation_failures
    if expect.restored is not None and report.restored != expect.restored:
        failures.append(f"restored {report.restored}, expected {expect.restored}")
    if expect.restored_below_total and report.restored >= offered:
        failures.append(f"restored {report.restored}, expected fewer than {offered}")
    if expect.duplicates_min is not None and report.duplicates < expect.duplicates_min:
        failures.append(f"duplicates {report.duplicates}, expected at least {expect.duplicates_min}")
    if expect.retrieved_per_request is not None:
        for node, counts in report.retrievals.items():
            for count in counts:
                if count != expect.retrieved_per_request:
                    failures.append(f"{node} retrieved {count}, expected {expect.retrieved_per_request}")
    for failure in failures:
        logger.warning("%s: %s", cfg.id, failure)
