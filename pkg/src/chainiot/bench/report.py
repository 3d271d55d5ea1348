"""Report emission: one canonical file with the full reports plus a flat per-workload table."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

from .. import canonical
from .metrics import MetricsReport
from .workload import READ_OPS

TABLE_COLUMNS = (
    "label", "operation", "kind", "N", "T", "W",
    "meanL", "medianL", "p95L", "dispatched", "failed", "errors",
)


def _row(r: MetricsReport) -> dict:
    is_tx = r.operation not in READ_OPS
    kind = "tx" if is_tx else "read"
    n, t, w, lat = (r.n_tx, r.t_tx, r.w_tx, r.l_tx) if is_tx else (r.n_read, r.t_read, r.w_read, r.l_read)

    def num(x):
        return "" if x is None else f"{x:.6f}"

    return {
        "label": r.extra.get("spec", {}).get("label", ""),
        "operation": r.operation,
        "kind": kind,
        "N": n,
        "T": num(t),
        "W": num(w),
        "meanL": num(lat.mean),
        "medianL": num(lat.median),
        "p95L": num(lat.p95),
        "dispatched": r.dispatched,
        "failed": r.failed,
        "errors": ";".join(f"{k}={v}" for k, v in sorted(r.errors.items())),
    }


def write_report(reports: Sequence[MetricsReport], out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    full = out / "report.json"
    canonical.dump_file(full, {"reports": [r.to_dict() for r in reports]})
    table = out / "summary.tsv"
    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(_row(r))
    return full, table


def load_report(path) -> list[MetricsReport]:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    return [MetricsReport.from_dict(d) for d in canonical.load_file(p)["reports"]]


def load_table(path) -> list[dict]:
    p = Path(path)
    if p.is_dir():
        p = p / "summary.tsv"
    with open(p, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))
