"""
chunkrelay command line: gen-dataset, run, report-diff and node.

Exit codes: 0 success, 1 verification or expectation failure, 2 configuration
or connection error. Progress goes to stderr; machine artifacts only to --out.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import tempfile
import threading
from pathlib import Path
from typing import List, Optional

from src.config import DATABASE_URL, HOME_DIR, MQTT_HOST, MQTT_PORT, STORAGE_LIMIT_BYTES, parse_size
from src.errors import ChunkRelayError, ConfigError, Disconnected, ShapeMismatch, VerificationFailure
from src.logs import configure_logging, stderr_console

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2


def cmd_gen_dataset(args: argparse.Namespace) -> int:
    from src.testbed.dataset import generate_dataset

    manifest = generate_dataset(args.seed, args.count, parse_size(args.size), Path(args.out))
    print(manifest)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    from src.testbed.report import render_frame, report_tables, write_report
    from src.testbed.runner import run_scenario
    from src.testbed.scenario import load_scenario

    cfg = load_scenario(Path(args.scenario))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out)
    try:
        if args.work:
            report = run_scenario(cfg, Path(args.work))
        else:
            with tempfile.TemporaryDirectory(prefix=f"chunkrelay-{cfg.id}-") as work:
                report = run_scenario(cfg, Path(work))
    except VerificationFailure as exc:
        if exc.report is not None:
            write_report(exc.report, out)
        logger.error("%s", exc)
        return EXIT_VERIFY
    write_report(report, out)
    render_frame(report_tables(report).summary, title=cfg.id, file=stderr_console.file)
    print(f"trace {report.trace_digest}")
    if report.expectation_failures:
        for failure in report.expectation_failures:
            logger.error("%s: expectation failed: %s", cfg.id, failure)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_report_diff(args: argparse.Namespace) -> int:
    from src.testbed.report import compare_runs, read_report, render_diff

    diff = compare_runs(read_report(Path(args.baseline)), read_report(Path(args.candidate)))
    render_diff(diff)
    return EXIT_OK


def _broker_address(value: str) -> tuple:
    host, _, port = value.rpartition(":")
    if not host:
        return value, MQTT_PORT
    try:
        return host, int(port)
    except ValueError as exc:
        raise ConfigError(f"bad broker address {value!r}") from exc


def cmd_node(args: argparse.Namespace) -> int:
    from src.nodes.node import ORCHESTRATOR_ID, HybridNode, OrchestratorNode, ProducerNode, RecoveryPolicy
    from src.testbed.dataset import dataset_files
    from src.transport.base import SessionMode
    from src.transport.mqtt_adapter import MqttTransport

    host, port = _broker_address(args.broker)
    session_mode = SessionMode(args.session_mode)
    policy = RecoveryPolicy(args.recovery) if args.recovery else (
        RecoveryPolicy.PAPER_FAITHFUL if session_mode is SessionMode.CLEAN else RecoveryPolicy.RESILIENT
    )
    node_id = args.id or (ORCHESTRATOR_ID if args.role == "orchestrator" else None)
    if not node_id:
        raise ConfigError("--id is required for producer and hybrid nodes")
    if args.role != "orchestrator" and args.request is None and args.dataset is None:
        raise ConfigError(f"a {args.role} needs --dataset or --request")
    if args.request is not None and args.role != "hybrid":
        raise ConfigError("--request needs --role hybrid")

    transport = MqttTransport(host, port, session_mode=session_mode)
    work_dir = Path(args.home) / node_id
    common = dict(policy=policy, seed=args.seed, chunk_size=parse_size(args.chunk_size))
    if args.role == "orchestrator":
        node = OrchestratorNode(
            node_id, transport, work_dir, storage_limit_bytes=STORAGE_LIMIT_BYTES, database_url=DATABASE_URL, **common
        )
    elif args.role == "hybrid":
        node = HybridNode(node_id, transport, work_dir, orchestrator=args.orchestrator, **common)
    else:
        node = ProducerNode(node_id, transport, work_dir, orchestrator=args.orchestrator, **common)

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    node.start()
    state = {"code": EXIT_OK, "launched": False, "request": None}

    def on_request_done(request) -> None:
        logger.info("%s: retrieved %d image(s) for %r", node_id, len(request.paths), request.selector)
        stop.set()

    # Work starts on the first poll after the broker acknowledged the connection.
    def poll() -> None:
        if not state["launched"] and node.connected:
            state["launched"] = True
            if args.dataset is not None:
                files = list(dataset_files(Path(args.dataset)).values())
                node.queue_package(files, args.package or f"Sample {node_id}")
            if args.request is not None:
                node.on_request_done = on_request_done
                state["request"] = node.request(args.request)
        request = state["request"]
        if request is not None and request.timed_out:
            logger.error("%s: no answer to %r", node_id, args.request)
            state["code"] = EXIT_VERIFY
            stop.set()
        elif state["launched"] and args.role == "producer" and node.idle:
            logger.info("%s: package sent", node_id)
            stop.set()
        if not stop.is_set():
            transport.call_later(node_id, 0.5, poll)

    transport.call_later(node_id, 0.5, poll)
    try:
        transport.serve(stop)
    finally:
        transport.close()
        node.close()
    return state["code"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkrelay", description="Reliable image transfer over MQTT")
    parser.add_argument("--log-level", default=None, help="error, info, debug or trace (default CHUNKRELAY_LOG)")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-dataset", help="Generate a deterministic synthetic image dataset")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--size", required=True, help='Image size, e.g. "1MB" or 1048576')
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_dataset)

    run = commands.add_parser("run", help="Run a scenario on the simulated broker and write CSV reports")
    run.add_argument("--scenario", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
    run.add_argument("--work", default=None, help="Keep node state and datasets here (default: a temp dir)")
    run.set_defaults(func=cmd_run)

    diff = commands.add_parser("report-diff", help="Compare two report directories")
    diff.add_argument("baseline")
    diff.add_argument("candidate")
    diff.set_defaults(func=cmd_report_diff)

    node = commands.add_parser("node", help="Run one node against a real MQTT broker")
    node.add_argument("--role", choices=["producer", "orchestrator", "hybrid"], required=True)
    node.add_argument("--broker", default=f"{MQTT_HOST}:{MQTT_PORT}", help="HOST:PORT")
    node.add_argument("--id", default=None)
    node.add_argument("--orchestrator", default="orch")
    node.add_argument("--dataset", default=None, help="Directory of images to send")
    node.add_argument("--package", default=None, help='Package name (default "Sample <id>")')
    node.add_argument("--request", default=None, help="Package selector to retrieve (hybrid only)")
    node.add_argument("--session-mode", choices=["clean", "persistent"], default="persistent")
    node.add_argument("--recovery", choices=["paper-faithful", "resilient"], default=None)
    node.add_argument("--chunk-size", default="256KB")
    node.add_argument("--home", default=str(HOME_DIR))
    node.add_argument("--seed", type=int, default=0)
    node.set_defaults(func=cmd_node)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(args.log_level)
        return args.func(args)
    except (ConfigError, Disconnected, ShapeMismatch) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except VerificationFailure as exc:
        logger.error("%s", exc)
        return EXIT_VERIFY
    except ChunkRelayError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
