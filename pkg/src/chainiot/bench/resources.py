"""Periodic per-node resource sampling through each node's Stats endpoint."""

from __future__ import annotations

import asyncio
import time
from typing import Optional, Sequence

from .. import wire
from ..errors import PlatformError
from ..identity import Identity
from ..topology import Endpoint

FIELDS = ("cpuSeconds", "rssBytes", "netInBytes", "netOutBytes", "ioReadBytes", "ioWriteBytes", "diskWriteBytes")


class ResourceSampler:
    """Collects one series per node; an unreachable node leaves a gap, not a made-up value."""

    def __init__(self, nodes: Sequence[Endpoint], identity: Identity, period: float = 1.0):
        self.nodes = list(nodes)
        self.identity = identity
        self.period = period
        self.series: dict[str, list[dict]] = {n.name: [] for n in self.nodes}
        self._clients: dict[str, wire.RpcClient] = {}
        self._task: Optional[asyncio.Task] = None
        self._t0 = time.monotonic()

    async def _stats(self, ep: Endpoint) -> Optional[dict]:
        try:
            c = self._clients.get(ep.name)
            if c is None or c.is_closed:
                c = self._clients[ep.name] = await wire.RpcClient.open(ep.host, ep.port, self.identity, timeout=1.0)
            return await c.call("Stats", {}, timeout=max(1.0, self.period))
        except PlatformError:
            return None

    async def sample_once(self) -> None:
        t = time.monotonic() - self._t0
        results = await asyncio.gather(*(self._stats(ep) for ep in self.nodes))
        for ep, st in zip(self.nodes, results):
            series = self.series[ep.name]
            if st is None:
                series.append({"t": t, "gap": True})
                continue
            row = {"t": t, **{k: st[k] for k in FIELDS if k in st}}
            prev = next((r for r in reversed(series) if not r.get("gap")), None)
            if prev is not None and t > prev["t"]:
                row["cpuPercent"] = 100.0 * (row["cpuSeconds"] - prev["cpuSeconds"]) / (t - prev["t"])
            else:
                row["cpuPercent"] = None
            series.append(row)

    async def _run(self) -> None:
        while True:
            await self.sample_once()
            await asyncio.sleep(self.period)

    def start(self) -> None:
        self._t0 = time.monotonic()
        self._task = asyncio.get_running_loop().create_task(self._run())

    async def stop(self) -> dict[str, list[dict]]:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        await self.sample_once()
        for c in self._clients.values():
            await c.close()
        return self.series


def summarize(series: dict[str, list[dict]]) -> dict:
    """Per node: mean CPU %, mean RSS, and totals of the cumulative counters over the run."""
    out = {}
    for name, rows in series.items():
        ok = [r for r in rows if not r.get("gap")]
        if len(ok) < 2:
            out[name] = {"samples": len(ok), "gaps": len(rows) - len(ok)}
            continue
        first, last = ok[0], ok[-1]
        dt = last["t"] - first["t"]
        d = {
            "samples": len(ok),
            "gaps": len(rows) - len(ok),
            "cpuPercentMean": 100.0 * (last["cpuSeconds"] - first["cpuSeconds"]) / dt if dt > 0 else None,
            "rssBytesMean": sum(r["rssBytes"] for r in ok) / len(ok),
        }
        for k in ("netInBytes", "netOutBytes", "ioReadBytes", "ioWriteBytes", "diskWriteBytes"):
            if k in last and k in first:
                d[k] = last[k] - first[k]
        out[name] = d
    return out
