"""Workload specifications and the driver that runs them against a live network."""

from __future__ import annotations

import asyncio
import logging
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from ..client import GatewayClient
from ..errors import PlatformError, ValidationError
from ..identity import Identity, Role, default_validity, issue_many_from_ca_file
from ..ledger import ValidationCode
from ..network import NetworkInfo, node_call
from .controller import FixedLoadController
from .metrics import OK, LatencySample, MetricsReport, compute_metrics
from .resources import ResourceSampler, summarize

log = logging.getLogger(__name__)

READ_OPS = (
    "device-registry/get",
    "device-registry/get-all",
    "service-registry/get",
    "service-registry/get-all",
    "service-broker/get",
    "service-broker/get-all",
)
TX_OPS = (
    "service-registry/register",
    "service-registry/deregister",
    "service-broker/request",
    "service-broker/respond",
    "service-broker/remove",
)
OPERATIONS = READ_OPS + TX_OPS


class BenchmarkAborted(PlatformError):
    code = "BENCHMARK_ABORTED"


@dataclass(frozen=True)
class WorkloadSpec:
    operation: str
    total_ops: int = 2000
    fixed_load: int = 100
    worker_count: int = 5
    connections_per_worker: int = 2
    payload_bytes: int = 0  # padding carried by written records
    rate: Optional[float] = None  # ops/s; when set, arrivals are paced instead of back-to-back
    gateways: tuple[str, ...] = ()  # peer names; empty = every peer
    seed: int = 0  # recorded with the report; op order itself is deterministic
    error_ceiling: float = 0.10
    sample_period: float = 1.0
    label: str = ""

    def __post_init__(self):
        if self.operation not in OPERATIONS:
            raise ValidationError(f"unknown benchmark operation {self.operation!r}")
        if not self.total_ops >= self.fixed_load >= 1:
            raise ValidationError("need totalOps >= fixedLoad >= 1")
        if self.worker_count < 1 or self.connections_per_worker < 1:
            raise ValidationError("need at least one worker and one connection per worker")
        if self.payload_bytes < 0:
            raise ValidationError("payloadBytes must be >= 0")
        if self.rate is not None and not self.rate > 0:
            raise ValidationError("rate must be positive")
        if not 0 <= self.error_ceiling <= 1:
            raise ValidationError("errorCeiling must be in [0, 1]")

    @property
    def is_read(self) -> bool:
        return self.operation in READ_OPS

    @property
    def connections(self) -> int:
        return self.worker_count * self.connections_per_worker

    def to_dict(self) -> dict:
        return {
            "operation": self.operation,
            "totalOps": self.total_ops,
            "fixedLoad": self.fixed_load,
            "workerCount": self.worker_count,
            "connectionsPerWorker": self.connections_per_worker,
            "payloadBytes": self.payload_bytes,
            "rate": self.rate,
            "gateways": list(self.gateways),
            "seed": self.seed,
            "errorCeiling": self.error_ceiling,
            "samplePeriod": self.sample_period,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        try:
            return cls(
                operation=d["operation"],
                total_ops=int(d.get("totalOps", 2000)),
                fixed_load=int(d.get("fixedLoad", 100)),
                worker_count=int(d.get("workerCount", 5)),
                connections_per_worker=int(d.get("connectionsPerWorker", 2)),
                payload_bytes=int(d.get("payloadBytes", 0)),
                rate=None if d.get("rate") is None else float(d["rate"]),
                gateways=tuple(d.get("gateways", ())),
                seed=int(d.get("seed", 0)),
                error_ceiling=float(d.get("errorCeiling", 0.10)),
                sample_period=float(d.get("samplePeriod", 1.0)),
                label=str(d.get("label", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad workload: {exc!r}") from None


# -- connections and seeding ---------------------------------------------------------

def issue_many(info: NetworkInfo, org: str, subjects: Sequence[str], role: Role = Role.WRITER) -> list[Identity]:
    return issue_many_from_ca_file(info.layout.ca(org), subjects, role, default_validity())


class Fleet:
    """The benchmark's client connections; each one is a distinct device identity."""

    def __init__(self, clients: list[GatewayClient]):
        self.clients = clients

    def __len__(self) -> int:
        return len(self.clients)

    def __getitem__(self, i: int) -> GatewayClient:
        return self.clients[i % len(self.clients)]

    @classmethod
    async def open(cls, info: NetworkInfo, count: int, gateways: Sequence[str] = (), tag: str = "") -> "Fleet":
        endpoints = [info.peer(g) for g in gateways] if gateways else list(info.peers)
        orgs = sorted({e.org for e in endpoints})
        tag = tag or uuid.uuid4().hex[:8]
        per_org: dict[str, list[Identity]] = {}
        plan = [orgs[i % len(orgs)] for i in range(count)]
        for org in orgs:
            n = plan.count(org)
            per_org[org] = issue_many(info, org, [f"bench-{tag}-{org}-{k}" for k in range(n)])
        clients = []
        used = {org: 0 for org in orgs}
        org_eps = {org: [e for e in endpoints if e.org == org] for org in orgs}
        for i, org in enumerate(plan):
            k = used[org]
            used[org] += 1
            ep = org_eps[org][k % len(org_eps[org])]
            clients.append((ep, per_org[org][k]))
        opened = await asyncio.gather(*(GatewayClient.connect(ep, ident) for ep, ident in clients))
        return cls(list(opened))

    async def close(self) -> None:
        await asyncio.gather(*(c.close() for c in self.clients), return_exceptions=True)


async def _bounded(coros, limit: int):
    sem = asyncio.Semaphore(limit)

    async def run(c):
        async with sem:
            return await c

    return await asyncio.gather(*(run(c) for c in coros))


def _pad(spec: WorkloadSpec) -> str:
    return "x" * spec.payload_bytes


@dataclass
class Plan:
    """Per-op argument factories, prepared by seeding."""

    spec: WorkloadSpec
    fleet: Fleet
    request_ids: dict[int, str] = field(default_factory=dict)
    max_in_flight: int = 0

    def client_for(self, i: int) -> GatewayClient:
        return self.fleet[i]

    def peer_of(self, i: int) -> GatewayClient:
        return self.fleet[i + 1]


def _ok(res, what: str):
    if res.code is not ValidationCode.VALID:
        raise BenchmarkAborted(f"seeding step {what} returned {res.code.value}")
    return res


async def _check(coro, what: str):
    return _ok(await coro, what)


async def seed(plan: Plan) -> None:
    """Create every prerequisite record; not timed."""
    spec, fleet = plan.spec, plan.fleet
    n = len(fleet)
    limit = spec.fixed_load
    op = spec.operation
    await _bounded([_check(c.register_device(f"bench-device-{i}", _pad(spec)), "register device")
                    for i, c in enumerate(fleet.clients)], limit)
    needs_service = op.startswith("service-registry/get") or op.startswith("service-broker")
    if needs_service:
        await _bounded([_check(c.register_service("svc", 1, _pad(spec)), "register service")
                        for c in fleet.clients], limit)
    if op == "service-registry/deregister":
        await _bounded([_check(plan.client_for(i).register_service(f"bench-{i}", 1, _pad(spec)), "register service")
                        for i in range(spec.total_ops)], limit)
    if op in ("service-broker/get", "service-broker/get-all"):
        # one pending request per device
        async def one(i):
            target = fleet[i]
            rid, res = await fleet[i + 1].request_service(target.org, target.device_id, "svc", "read", [_pad(spec)])
            _ok(res, "request")
            plan.request_ids[i] = rid

        await _bounded([one(i) for i in range(n)], limit)
    if op in ("service-broker/respond", "service-broker/remove"):
        # op i: the request the fleet[i] device answers (respond) or fleet[i] created (remove)
        async def one(i):
            if op == "service-broker/respond":
                target, requester = fleet[i], fleet[i + 1]
            else:
                target, requester = fleet[i + 1], fleet[i]
            rid, res = await requester.request_service(target.org, target.device_id, "svc", "read", [_pad(spec)])
            _ok(res, "request")
            plan.request_ids[i] = rid

        await _bounded([one(i) for i in range(spec.total_ops)], limit)


async def run_op(plan: Plan, i: int) -> tuple[str, str]:
    """Execute op *i*; returns (kind, outcome)."""
    spec = plan.spec
    op = spec.operation
    c = plan.client_for(i)
    if op == "device-registry/get":
        await c.get_device(c.org, c.device_id)
    elif op == "device-registry/get-all":
        await c.get_all_devices(c.org)
    elif op == "service-registry/get":
        await c.get_service(c.org, c.device_id, "svc")
    elif op == "service-registry/get-all":
        await c.get_all_services(c.org)
    elif op == "service-broker/get":
        await c.get_request(plan.request_ids[i % len(plan.fleet)])
    elif op == "service-broker/get-all":
        await c.get_pending_requests(c.org, c.device_id)
    elif op == "service-registry/register":
        return "tx", (await c.register_service(f"bench-{i}", 1, _pad(spec))).code.value
    elif op == "service-registry/deregister":
        return "tx", (await c.deregister_service(f"bench-{i}")).code.value
    elif op == "service-broker/request":
        target = plan.peer_of(i)
        _, res = await c.request_service(target.org, target.device_id, "svc", "read", [_pad(spec)])
        return "tx", res.code.value
    elif op == "service-broker/respond":
        return "tx", (await c.respond(plan.request_ids[i], 200, _pad(spec).encode() or None)).code.value
    elif op == "service-broker/remove":
        return "tx", (await c.remove_request(plan.request_ids[i])).code.value
    return "read", OK


async def ordering_calls(info: NetworkInfo) -> dict[str, int]:
    """Broadcasts issued by gateways and broadcasts received by ordering nodes."""
    out = {"gateway": 0, "orderer": 0}
    for ep in info.peers:
        out["gateway"] += (await node_call(info, ep, "Stats"))["orderingCalls"]
    for ep in info.orderers:
        try:
            out["orderer"] += (await node_call(info, ep, "Stats", timeout=2.0))["broadcasts"]
        except PlatformError:
            pass  # a stopped orderer keeps its count to itself
    return out


async def heights(info: NetworkInfo) -> dict[str, int]:
    return {ep.name: (await node_call(info, ep, "Stats"))["height"] for ep in info.peers}


async def replay_check(info: NetworkInfo) -> dict[str, bool]:
    """Per peer: does replaying its chain from genesis reproduce its live state and codes?"""
    out = {}
    for ep in info.peers:
        r = await node_call(info, ep, "Inspect", {"replay": True}, timeout=300)
        out[ep.name] = r["replayStateHash"] == r["stateHash"] and r["codesMatch"]
    return out


async def run_workload(info: NetworkInfo, spec: WorkloadSpec, fleet: Fleet | None = None,
                       on_progress: Callable[[int], None] | None = None,
                       check_replay: bool = True) -> MetricsReport:
    own_fleet = fleet is None
    if fleet is None:
        fleet = await Fleet.open(info, spec.connections, spec.gateways)
    try:
        plan = Plan(spec, fleet)
        await seed(plan)
        admin = info.wallet().get(f"admin@{info.peers[0].org}")
        calls_before = await ordering_calls(info)
        heights_before = await heights(info)
        sampler = ResourceSampler(info.peers + info.orderers, admin, spec.sample_period)
        sampler.start()
        samples = await drive(plan, on_progress)
        series = await sampler.stop()
        calls_after = await ordering_calls(info)
        heights_after = await heights(info)
        replay = await replay_check(info) if check_replay else {}
    finally:
        if own_fleet:
            await fleet.close()
    report = compute_metrics(samples, spec.operation)
    report.max_in_flight = plan.max_in_flight
    report.resources = {"series": series, "summary": summarize(series)}
    report.extra = {
        "spec": spec.to_dict(),
        "orderingCalls": calls_after["gateway"] - calls_before["gateway"],
        "ordererBroadcasts": calls_after["orderer"] - calls_before["orderer"],
        "heightsBefore": heights_before,
        "heightsAfter": heights_after,
        "replayConsistent": replay,
    }
    return report


async def drive(plan: Plan, on_progress=None) -> list[LatencySample]:
    spec = plan.spec
    ctl = FixedLoadController(spec.fixed_load)
    loop = asyncio.get_running_loop()
    samples: list[Optional[LatencySample]] = [None] * spec.total_ops
    failures = 0
    aborted: list[BaseException] = []
    tasks = set()

    async def one(i: int, kind_hint: str):
        nonlocal failures
        t0 = time.perf_counter()
        try:
            kind, outcome = await run_op(plan, i)
        except PlatformError as err:
            kind, outcome = kind_hint, err.code
            failures += 1
        except OSError as err:
            kind, outcome = kind_hint, type(err).__name__
            failures += 1
        samples[i] = LatencySample(kind, t0, time.perf_counter(), outcome)
        await ctl.release()
        done = ctl.completed
        if on_progress:
            on_progress(done)
        if done >= spec.fixed_load and failures / done > spec.error_ceiling and not aborted:
            aborted.append(BenchmarkAborted(f"error rate {failures}/{done} exceeds ceiling {spec.error_ceiling}"))

    kind_hint = "read" if spec.is_read else "tx"
    start = loop.time()
    for i in range(spec.total_ops):
        if aborted:
            break
        if spec.rate is not None:
            wait = start + i / spec.rate - loop.time()
            if wait > 0:
                await asyncio.sleep(wait)
        await ctl.acquire()
        t = loop.create_task(one(i, kind_hint))
        tasks.add(t)
        t.add_done_callback(tasks.discard)
    await ctl.drain()
    plan.max_in_flight = ctl.max_in_flight
    if aborted:
        raise aborted[0]
    assert ctl.dispatched == ctl.completed == spec.total_ops
    return [s for s in samples if s is not None]
