"""Per-step timing aggregation and reporting.

Collects wall-clock durations from a run into summary statistics, renders
them as text, JSON, and CSV, and compares labeled runs side by side the way
a benchmark table would.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

log = logging.getLogger("cosimlink.metrics")

# A paced run's average step always lands slightly above the period because
# sleep wakeups are late, never early.  Only an average beyond this margin
# indicates the workload genuinely cannot keep up.
INFEASIBILITY_MARGIN = 0.05


@dataclass(frozen=True)
class TimingRecord:
    step_index: int
    wall_duration: float
    overrun: bool = False

    def __post_init__(self):
        if self.wall_duration < 0:
            raise ValueError(f"negative wall_duration {self.wall_duration}")


@dataclass(frozen=True)
class TimingReport:
    label: str
    mode: str
    step_count: int
    step_size: float
    total_wall: float
    average_step_time: float
    min_step_time: float
    max_step_time: float
    p95_step_time: float
    overrun_count: int
    cpu_seconds: Optional[float] = None

    @property
    def infeasible(self) -> bool:
        """True when the average step outran the period by more than jitter."""
        return self.average_step_time > self.step_size * (1.0 + INFEASIBILITY_MARGIN)

    def to_json_dict(self) -> dict:
        doc = {
            "label": self.label,
            "mode": self.mode,
            "step_count": self.step_count,
            "step_size": self.step_size,
            "total_wall": self.total_wall,
            "average_step_time": self.average_step_time,
            "min_step_time": self.min_step_time,
            "max_step_time": self.max_step_time,
            "p95_step_time": self.p95_step_time,
            "overrun_count": self.overrun_count,
            "infeasible": self.infeasible,
        }
        if self.cpu_seconds is not None:
            doc["cpu_seconds"] = self.cpu_seconds
        return doc


def report_from_json_dict(doc: dict) -> TimingReport:
    return TimingReport(
        label=str(doc["label"]),
        mode=str(doc["mode"]),
        step_count=int(doc["step_count"]),
        step_size=float(doc["step_size"]),
        total_wall=float(doc["total_wall"]),
        average_step_time=float(doc["average_step_time"]),
        min_step_time=float(doc["min_step_time"]),
        max_step_time=float(doc["max_step_time"]),
        p95_step_time=float(doc["p95_step_time"]),
        overrun_count=int(doc["overrun_count"]),
        cpu_seconds=float(doc["cpu_seconds"]) if "cpu_seconds" in doc else None,
    )


def finalize_report(records: Sequence[TimingRecord], step_size: float,
                    mode: str, label: str = "",
                    cpu_seconds: Optional[float] = None) -> TimingReport:
    """Aggregate one run's records.

    p95 uses the nearest-rank method: the value at index ceil(0.95 N) - 1 of
    the ascending-sorted durations.
    """
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    durations = sorted(r.wall_duration for r in records)
    count = len(durations)
    total = sum(durations)
    return TimingReport(
        label=label,
        mode=mode,
        step_count=count,
        step_size=step_size,
        total_wall=total,
        average_step_time=total / count,
        min_step_time=durations[0],
        max_step_time=durations[-1],
        p95_step_time=durations[math.ceil(0.95 * count) - 1],
        overrun_count=sum(1 for r in records if r.overrun),
        cpu_seconds=cpu_seconds,
    )


def format_report(report: TimingReport) -> str:
    lines = [
        f"run:            {report.label or '(unlabeled)'}",
        f"mode:           {report.mode}",
        f"steps:          {report.step_count} x {report.step_size:g} s",
        f"total wall:     {report.total_wall:.4f} s",
        f"avg step:       {report.average_step_time * 1e3:.4f} ms",
        f"min/p95/max:    {report.min_step_time * 1e3:.4f} / "
        f"{report.p95_step_time * 1e3:.4f} / {report.max_step_time * 1e3:.4f} ms",
        f"overruns:       {report.overrun_count}",
        f"real-time:      {'infeasible' if report.infeasible else 'feasible'}",
    ]
    if report.cpu_seconds is not None:
        lines.insert(4, f"process cpu:    {report.cpu_seconds:.4f} s")
    return "\n".join(lines)


_COMPARE_ROWS = (
    ("total wall [s]", lambda r: f"{r.total_wall:.4f}"),
    ("avg step [ms]", lambda r: f"{r.average_step_time * 1e3:.4f}"),
    ("min step [ms]", lambda r: f"{r.min_step_time * 1e3:.4f}"),
    ("p95 step [ms]", lambda r: f"{r.p95_step_time * 1e3:.4f}"),
    ("max step [ms]", lambda r: f"{r.max_step_time * 1e3:.4f}"),
    ("overruns", lambda r: str(r.overrun_count)),
    ("feasible", lambda r: "no *" if r.infeasible else "yes"),
)


def compare_runs(reports: Sequence[TimingReport]) -> str:
    """Render labeled runs as one aligned table, a column per run.

    Runs with differing step counts are still compared; a warning is logged
    because their totals are not like for like.
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    counts = {r.step_count for r in reports}
    if len(counts) > 1:
        log.warning("comparing runs with differing step counts: %s",
                    sorted(counts))

    labels = [r.label or f"run{i}" for i, r in enumerate(reports)]
    header = ["metric", *labels]
    body = [["steps", *(str(r.step_count) for r in reports)],
            ["mode", *(r.mode for r in reports)],
            ["step size [s]", *(f"{r.step_size:g}" for r in reports)]]
    body += [[name, *(cell(r) for r in reports)] for name, cell in _COMPARE_ROWS]

    widths = [max(len(row[i]) for row in [header, *body])
              for i in range(len(header))]
    def fmt(row):
        return "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines += [fmt(row) for row in body]
    if any(r.infeasible for r in reports):
        lines.append("* average step exceeded the step size: "
                     "not real-time capable")
    return "\n".join(lines)


def comparison_csv(reports: Sequence[TimingReport]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["label", "total_wall", "as_t", "min", "max", "p95",
                     "overruns", "infeasible"])
    for r in reports:
        writer.writerow([
            r.label, f"{r.total_wall:.6f}", f"{r.average_step_time:.6f}",
            f"{r.min_step_time:.6f}", f"{r.max_step_time:.6f}",
            f"{r.p95_step_time:.6f}", r.overrun_count,
            "yes" if r.infeasible else "no",
        ])
    return out.getvalue()


def write_timing_csv(path, records: Sequence[TimingRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["step", "wall_seconds", "overrun"])
        for record in records:
            writer.writerow([record.step_index,
                             f"{record.wall_duration:.9f}",
                             int(record.overrun)])


def write_report_json(path, report: TimingReport) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(report.to_json_dict(), handle, indent=2)
        handle.write("\n")


def load_report_json(path) -> TimingReport:
    with open(path, encoding="utf-8") as handle:
        return report_from_json_dict(json.load(handle))
