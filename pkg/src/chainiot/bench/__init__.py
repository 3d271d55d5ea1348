"""Fixed-load benchmark harness: workload driving, metrics, resource sampling, reports."""

from .controller import FixedLoadController
from .metrics import LatencySample, LatencyStats, MetricsReport, compute_metrics
from .report import load_report, load_table, write_report
from .resources import ResourceSampler, summarize
from .workload import (
    OPERATIONS,
    READ_OPS,
    TX_OPS,
    BenchmarkAborted,
    Fleet,
    WorkloadSpec,
    replay_check,
    run_workload,
)

__all__ = [
    "BenchmarkAborted",
    "FixedLoadController",
    "Fleet",
    "LatencySample",
    "LatencyStats",
    "MetricsReport",
    "OPERATIONS",
    "READ_OPS",
    "ResourceSampler",
    "TX_OPS",
    "WorkloadSpec",
    "compute_metrics",
    "load_report",
    "load_table",
    "run_workload",
    "summarize",
    "write_report",
    "replay_check",
]
