"""Latency samples and the throughput/latency metrics computed from them.

For reads, latency is ``t_response - t_submit`` and throughput is
``N_read / T_read``.  For transactions, latency is ``t_confirm - t_submit``
and throughput is ``N_tx / T_tx``, where N_tx counts committed VALID
transactions once each (not once per peer).  T spans the first dispatch to
the last completion of that kind.
"""

from __future__ import annotations

import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from ..errors import ValidationError

OK = "OK"  # outcome of a successful read
VALID = "VALID"


@dataclass(frozen=True)
class LatencySample:
    kind: str  # "read" | "tx"
    t_submit: float
    t_done: float  # t_response for reads, t_confirm for transactions
    outcome: str

    def __post_init__(self):
        if self.kind not in ("read", "tx"):
            raise ValidationError(f"bad sample kind {self.kind!r}")
        if self.t_done < self.t_submit:
            raise ValidationError("completion precedes submission")

    @property
    def latency(self) -> float:
        return self.t_done - self.t_submit

    @property
    def succeeded(self) -> bool:
        return self.outcome == (OK if self.kind == "read" else VALID)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tSubmit": self.t_submit, "tDone": self.t_done, "outcome": self.outcome}


@dataclass(frozen=True)
class LatencyStats:
    mean: Optional[float]
    median: Optional[float]
    p95: Optional[float]

    @classmethod
    def of(cls, values: Sequence[float]) -> "LatencyStats":
        if not values:
            return cls(None, None, None)
        if len(values) == 1:
            v = values[0]
            return cls(v, v, v)
        return cls(statistics.fmean(values), statistics.median(values),
                   statistics.quantiles(values, n=20, method="inclusive")[18])

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "p95": self.p95}


@dataclass
class MetricsReport:
    operation: str
    n_read: int
    t_read: float
    w_read: float
    l_read: LatencyStats
    n_tx: int
    t_tx: float
    w_tx: float
    l_tx: LatencyStats
    errors: dict[str, int]
    dispatched: int = 0
    completed: int = 0
    failed: int = 0
    max_in_flight: int = 0
    resources: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def throughput(self) -> float:
        return self.w_tx if self.n_tx or self.t_tx else self.w_read

    @property
    def latency(self) -> LatencyStats:
        return self.l_tx if self.n_tx or self.t_tx else self.l_read

    def to_dict(self) -> dict:
        return {
            "operation": self.operation,
            "read": {"N": self.n_read, "T": self.t_read, "W": self.w_read, "L": self.l_read.to_dict()},
            "tx": {"N": self.n_tx, "T": self.t_tx, "W": self.w_tx, "L": self.l_tx.to_dict()},
            "errors": dict(sorted(self.errors.items())),
            "dispatched": self.dispatched,
            "completed": self.completed,
            "failed": self.failed,
            "maxInFlight": self.max_in_flight,
            "resources": self.resources,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        def stats(x):
            return LatencyStats(x["mean"], x["median"], x["p95"])

        return cls(
            operation=d["operation"],
            n_read=d["read"]["N"], t_read=d["read"]["T"], w_read=d["read"]["W"], l_read=stats(d["read"]["L"]),
            n_tx=d["tx"]["N"], t_tx=d["tx"]["T"], w_tx=d["tx"]["W"], l_tx=stats(d["tx"]["L"]),
            errors=dict(d["errors"]), dispatched=d["dispatched"], completed=d["completed"], failed=d["failed"],
            max_in_flight=d["maxInFlight"], resources=d.get("resources", {}), extra=d.get("extra", {}),
        )


def _window(samples: Sequence[LatencySample]) -> float:
    if not samples:
        return 0.0
    return max(s.t_done for s in samples) - min(s.t_submit for s in samples)


def _rate(n: int, t: float) -> float:
    return n / t if t > 0 else 0.0


def compute_metrics(samples: Iterable[LatencySample], operation: str = "") -> MetricsReport:
    samples = list(samples)
    if not samples:
        raise ValidationError("no samples")
    reads = [s for s in samples if s.kind == "read"]
    txs = [s for s in samples if s.kind == "tx"]
    ok_reads = [s for s in reads if s.succeeded]
    ok_txs = [s for s in txs if s.succeeded]
    t_read, t_tx = _window(reads), _window(txs)
    errors = Counter(s.outcome for s in samples if not s.succeeded)
    return MetricsReport(
        operation=operation,
        n_read=len(ok_reads),
        t_read=t_read,
        w_read=_rate(len(ok_reads), t_read),
        l_read=LatencyStats.of([s.latency for s in ok_reads]),
        n_tx=len(ok_txs),
        t_tx=t_tx,
        w_tx=_rate(len(ok_txs), t_tx),
        l_tx=LatencyStats.of([s.latency for s in ok_txs]),
        errors=dict(errors),
        dispatched=len(samples),
        completed=len(samples) - sum(errors.values()),
        failed=sum(errors.values()),
    )
