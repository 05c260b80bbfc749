"""Per-job measurement and aggregate reporting.

TTFT, turnaround, job completion rate, SLO attainment, and the BE slowdown
ratio against a reference run, plus the fixed-format CSV emitters used to
compare schedulers.  Percentiles use the nearest-rank convention
(index = ceil(p * n) - 1 on the sorted sample).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .core import Phase, Priority, Sequence

JOBS_CSV_HEADER = "id,priority,arrival_ms,ttft_ms,turnaround_ms,prompt_len,output_len"

SUMMARY_FIELDS = [
    "scheduler",
    "rate",
    "jobs",
    "duration_ms",
    "completion_rate_jps",
    "ls_jobs",
    "ls_mean_ttft_ms",
    "ls_median_ttft_ms",
    "ls_p99_ttft_ms",
    "ls_mean_turnaround_ms",
    "ls_p99_turnaround_ms",
    "ls_slo_attainment",
    "be_jobs",
    "be_mean_ttft_ms",
    "be_median_ttft_ms",
    "be_p99_ttft_ms",
    "be_mean_turnaround_ms",
    "be_p99_turnaround_ms",
    "be_slo_attainment",
    "be_slowdown_vs_reference",
]


@dataclass(frozen=True)
class JobRecord:
    """Immutable record of one finished job."""

    seq_id: int
    priority: Priority
    arrival_ms: float
    first_token_ms: float
    finish_ms: float
    prompt_len: int
    output_len: int

    @property
    def ttft_ms(self) -> float:
        return self.first_token_ms - self.arrival_ms

    @property
    def turnaround_ms(self) -> float:
        return self.finish_ms - self.arrival_ms


class MetricsRecorder:
    """Append-only job log; each finished sequence is recorded exactly once."""

    def __init__(self):
        self.records: list[JobRecord] = []
        self._seen: set[int] = set()

    def record(self, seq: Sequence) -> JobRecord:
        if seq.phase is not Phase.FINISHED or seq.finish_time is None:
            raise ValueError(f"sequence {seq.id} has not finished")
        if seq.id in self._seen:
            raise ValueError(f"sequence {seq.id} recorded twice")
        rec = JobRecord(
            seq_id=seq.id,
            priority=seq.priority,
            arrival_ms=seq.arrival_time,
            first_token_ms=seq.first_token_time,
            finish_ms=seq.finish_time,
            prompt_len=seq.prompt_len,
            output_len=len(seq.generated),
        )
        if rec.ttft_ms < 0 or rec.turnaround_ms < rec.ttft_ms:
            raise ValueError(f"sequence {seq.id} has inconsistent timestamps")
        self._seen.add(seq.id)
        self.records.append(rec)
        return rec


def nearest_rank(values: list[float], percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p*n)-th smallest value."""
    if not values:
        raise ValueError("percentile of an empty sample")
    ordered = sorted(values)
    rank = max(1, math.ceil(percentile * len(ordered)))
    return ordered[rank - 1]


@dataclass(frozen=True)
class PriorityStats:
    jobs: int
    mean_ttft_ms: float
    median_ttft_ms: float
    p99_ttft_ms: float
    mean_turnaround_ms: float
    p99_turnaround_ms: float
    slo_attainment: float


@dataclass(frozen=True)
class AggregateReport:
    jobs: int
    duration_ms: float
    completion_rate_jps: float
    ls: Optional[PriorityStats]
    be: Optional[PriorityStats]
    be_slowdown_vs_reference: Optional[float]


def _stats_for(records: list[JobRecord], slo_ms: float) -> Optional[PriorityStats]:
    if not records:
        return None
    ttfts = [r.ttft_ms for r in records]
    turnarounds = [r.turnaround_ms for r in records]
    attained = sum(1 for t in ttfts if t <= slo_ms)
    return PriorityStats(
        jobs=len(records),
        mean_ttft_ms=sum(ttfts) / len(ttfts),
        median_ttft_ms=nearest_rank(ttfts, 0.50),
        p99_ttft_ms=nearest_rank(ttfts, 0.99),
        mean_turnaround_ms=sum(turnarounds) / len(turnarounds),
        p99_turnaround_ms=nearest_rank(turnarounds, 0.99),
        slo_attainment=attained / len(records),
    )


def aggregate(
    records: list[JobRecord],
    slo_ms: float,
    duration_ms: float,
    reference: Optional[AggregateReport] = None,
) -> AggregateReport:
    """Aggregate finished-job records over one run of the given virtual duration."""
    if not records:
        raise ValueError("cannot aggregate an empty record set")
    if duration_ms <= 0:
        raise ValueError("duration must be positive")
    ls_stats = _stats_for([r for r in records if r.priority is Priority.LATENCY_SENSITIVE], slo_ms)
    be_stats = _stats_for([r for r in records if r.priority is Priority.BEST_EFFORT], slo_ms)
    slowdown = None
    if reference is not None and reference.be is not None and be_stats is not None:
        if reference.be.mean_turnaround_ms > 0:
            slowdown = be_stats.mean_turnaround_ms / reference.be.mean_turnaround_ms
    return AggregateReport(
        jobs=len(records),
        duration_ms=duration_ms,
        completion_rate_jps=len(records) / (duration_ms / 1000.0),
        ls=ls_stats,
        be=be_stats,
        be_slowdown_vs_reference=slowdown,
    )


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.3f}"


def jobs_csv_lines(records: list[JobRecord]) -> list[str]:
    lines = [JOBS_CSV_HEADER]
    for r in sorted(records, key=lambda r: r.seq_id):
        lines.append(
            f"{r.seq_id},{r.priority.tag},{r.arrival_ms:.3f},{r.ttft_ms:.3f},"
            f"{r.turnaround_ms:.3f},{r.prompt_len},{r.output_len}"
        )
    return lines


def write_jobs_csv(records: list[JobRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(jobs_csv_lines(records)) + "\n")


def summary_row(scheduler: str, rate: float, report: AggregateReport) -> dict[str, str]:
    def stats_cells(prefix: str, stats: Optional[PriorityStats]) -> dict[str, str]:
        if stats is None:
            return {f"{prefix}_{k}": "" for k in (
                "jobs", "mean_ttft_ms", "median_ttft_ms", "p99_ttft_ms",
                "mean_turnaround_ms", "p99_turnaround_ms", "slo_attainment")}
        return {
            f"{prefix}_jobs": str(stats.jobs),
            f"{prefix}_mean_ttft_ms": _fmt(stats.mean_ttft_ms),
            f"{prefix}_median_ttft_ms": _fmt(stats.median_ttft_ms),
            f"{prefix}_p99_ttft_ms": _fmt(stats.p99_ttft_ms),
            f"{prefix}_mean_turnaround_ms": _fmt(stats.mean_turnaround_ms),
            f"{prefix}_p99_turnaround_ms": _fmt(stats.p99_turnaround_ms),
            f"{prefix}_slo_attainment": _fmt(stats.slo_attainment),
        }

    row = {
        "scheduler": scheduler,
        "rate": f"{rate:g}",
        "jobs": str(report.jobs),
        "duration_ms": _fmt(report.duration_ms),
        "completion_rate_jps": f"{report.completion_rate_jps:.6f}",
        "be_slowdown_vs_reference": _fmt(report.be_slowdown_vs_reference),
    }
    row.update(stats_cells("ls", report.ls))
    row.update(stats_cells("be", report.be))
    return row


def write_summary_csv(rows: list[dict[str, str]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(SUMMARY_FIELDS) + "\n")
        for row in rows:
            fh.write(",".join(row.get(field, "") for field in SUMMARY_FIELDS) + "\n")
