"""
Report tables: summary.csv, transfers.csv and nodes.csv, plus run comparison.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, TextIO, Union

import pandas as pd

try:
    from tabulate import tabulate
except Exception:  # pragma: no cover - optional dependency
    tabulate = None
try:
    from rich.console import Console
    from rich.table import Table
    from rich import box
except Exception:  # pragma: no cover - optional dependency
    Console = None
    Table = None

from src.config import MIB
from src.errors import IoFailure, ShapeMismatch
from src.nodes.metrics import MetricsCounters
from src.testbed.runner import MetricsReport

logger = logging.getLogger(__name__)

SUMMARY_NAME = "summary.csv"
TRANSFERS_NAME = "transfers.csv"
NODES_NAME = "nodes.csv"

SUMMARY_COLUMNS = [
    "exp_id",
    "producers",
    "pkg_mb",
    "imgs",
    "size_mb",
    "sent",
    "received",
    "duplicates",
    "restored",
    "downtime_s",
    "makespan_s",
]
TRANSFER_COLUMNS = ["hash", "sender", "start_s", "end_s", "retries", "missing_rounds"]
COUNTER_COLUMNS = [f.name for f in fields(MetricsCounters) if f.type in ("int", int)]
NODE_COLUMNS = ["node", "role", *COUNTER_COLUMNS, "makespan_s", "retrieval_s"]
DIFF_COUNTS = ["sent", "received", "duplicates", "restored"]


@dataclass
class ReportTables:
    summary: pd.DataFrame
    transfers: pd.DataFrame
    nodes: pd.DataFrame

    @property
    def row(self) -> pd.Series:
        if self.summary.empty:
            raise ShapeMismatch("summary table has no rows")
        return self.summary.iloc[0]


@dataclass
class DiffSummary:
    baseline: str
    candidate: str
    makespan_delta_s: float
    count_deltas: Dict[str, int] = field(default_factory=dict)
    # Per-producer makespan of the candidate over the baseline, for nodes present in both.
    node_makespan_ratios: Dict[str, float] = field(default_factory=dict)

    @property
    def unchanged(self) -> bool:
        return self.makespan_delta_s == 0 and not any(self.count_deltas.values())


def _summary_frame(report: MetricsReport) -> pd.DataFrame:
    if report.images_begun == 0:
        return pd.DataFrame([], columns=SUMMARY_COLUMNS)
    size_mb = report.image_size / MIB
    row = {
        "exp_id": report.scenario_id,
        "producers": report.producers,
        "pkg_mb": report.image_count * size_mb,
        "imgs": report.image_count,
        "size_mb": size_mb,
        "sent": report.sent,
        "received": report.received,
        "duplicates": report.duplicates,
        "restored": report.restored,
        "downtime_s": report.downtime_s,
        "makespan_s": report.makespan_s,
    }
    return pd.DataFrame([row], columns=SUMMARY_COLUMNS)


def _transfers_frame(report: MetricsReport) -> pd.DataFrame:
    rows = [
        {
            "hash": record.hash_file,
            "sender": record.sender,
            "start_s": record.start_s,
            "end_s": record.end_s,
            "retries": record.retries,
            "missing_rounds": record.missing_rounds,
        }
        for record in report.transfers
    ]
    return pd.DataFrame(rows, columns=TRANSFER_COLUMNS)


def _nodes_frame(report: MetricsReport) -> pd.DataFrame:
    rows = []
    for node in report.nodes:
        row = {"node": node.node, "role": node.role}
        row.update(node.metrics.counter_fields())
        row["makespan_s"] = node.makespan_s
        row["retrieval_s"] = node.retrieval_s
        rows.append(row)
    return pd.DataFrame(rows, columns=NODE_COLUMNS)


def report_tables(report: MetricsReport) -> ReportTables:
    return ReportTables(_summary_frame(report), _transfers_frame(report), _nodes_frame(report))


def write_report(report: MetricsReport, out_dir: Path) -> List[Path]:
    """Write the three CSVs; identical reports produce byte-identical files."""
    out_dir = Path(out_dir)
    tables = report_tables(report)
    targets = [
        (tables.summary, out_dir / SUMMARY_NAME),
        (tables.transfers, out_dir / TRANSFERS_NAME),
        (tables.nodes, out_dir / NODES_NAME),
    ]
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for frame, path in targets:
            frame.to_csv(path, index=False, float_format="%.3f", lineterminator="\n")
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out_dir}: {exc}") from exc
    logger.info("report written to %s", out_dir)
    return [path for _, path in targets]


def read_report(directory: Path) -> ReportTables:
    directory = Path(directory)
    try:
        return ReportTables(
            pd.read_csv(directory / SUMMARY_NAME, dtype={"exp_id": str}),
            pd.read_csv(directory / TRANSFERS_NAME, dtype={"hash": str, "sender": str}),
            pd.read_csv(directory / NODES_NAME, dtype={"node": str, "role": str}),
        )
    except (OSError, pd.errors.EmptyDataError) as exc:
        raise IoFailure(f"cannot read report from {directory}: {exc}") from exc


def _node_makespans(tables: ReportTables) -> Dict[str, float]:
    frame = tables.nodes.dropna(subset=["makespan_s"])
    return {str(row.node): float(row.makespan_s) for row in frame.itertuples(index=False)}


def compare_runs(
    baseline: Union[MetricsReport, ReportTables],
    candidate: Union[MetricsReport, ReportTables],
) -> DiffSummary:
    """
    Makespan and count deltas (candidate minus baseline).

    Both runs must ship the same package shape (images per package and image
    size); the producer count may differ.
    """
    a = report_tables(baseline) if isinstance(baseline, MetricsReport) else baseline
    b = report_tables(candidate) if isinstance(candidate, MetricsReport) else candidate
    row_a, row_b = a.row, b.row
    if int(row_a["imgs"]) != int(row_b["imgs"]) or not math.isclose(
        float(row_a["size_mb"]), float(row_b["size_mb"]), abs_tol=5e-4
    ):
        raise ShapeMismatch(
            f"{row_a['exp_id']} ships {row_a['imgs']} x {row_a['size_mb']} MB, "
            f"{row_b['exp_id']} ships {row_b['imgs']} x {row_b['size_mb']} MB"
        )
    makespans_a = _node_makespans(a)
    makespans_b = _node_makespans(b)
    ratios = {
        node: makespans_b[node] / makespans_a[node]
        for node in sorted(set(makespans_a) & set(makespans_b))
        if makespans_a[node] > 0
    }
    return DiffSummary(
        baseline=str(row_a["exp_id"]),
        candidate=str(row_b["exp_id"]),
        makespan_delta_s=round(float(row_b["makespan_s"]) - float(row_a["makespan_s"]), 3),
        count_deltas={name: int(row_b[name]) - int(row_a[name]) for name in DIFF_COUNTS},
        node_makespan_ratios=ratios,
    )


# Console rendering.


def _cell(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    if isinstance(value, float):
        return f"{value:,.3f}"
    if isinstance(value, int):
        return f"{value:,}"
    return str(value)


def render_frame(frame: pd.DataFrame, *, title: Optional[str] = None, file: Optional[TextIO] = None) -> None:
    rows = frame.to_dict(orient="records")
    if Console and Table:
        console = Console(file=file)
        table = Table(title=title, show_header=True, header_style="bold cyan", box=box.MARKDOWN)
        for column in frame.columns:
            numeric = pd.api.types.is_numeric_dtype(frame[column])
            table.add_column(str(column), justify="right" if numeric else "left")
        for row in rows:
            table.add_row(*(_cell(row[column]) for column in frame.columns))
        console.print(table)
    elif tabulate:
        print(tabulate(rows, headers="keys", tablefmt="github", floatfmt=".3f"), file=file)
    else:
        for row in rows:
            print("  ".join(f"{key}={_cell(value)}" for key, value in row.items()), file=file)


def render_diff(diff: DiffSummary, *, file: Optional[TextIO] = None) -> None:
    rows = [{"metric": "makespan_s", "delta": diff.makespan_delta_s}]
    rows.extend({"metric": name, "delta": delta} for name, delta in diff.count_deltas.items())
    rows.extend({"metric": f"{node} makespan ratio", "delta": ratio} for node, ratio in diff.node_makespan_ratios.items())
    render_frame(pd.DataFrame(rows, columns=["metric", "delta"]), title=f"{diff.candidate} vs {diff.baseline}", file=file)
