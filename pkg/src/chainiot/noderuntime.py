"""Pieces shared by peer and orderer processes: node config, CRL watching, stats."""

from __future__ import annotations

import asyncio
import logging
import os
import signal
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Optional

import psutil

from . import canonical, wire
from .identity import Certificate, Identity, MembershipDirectory
from .ordering.cutter import BatchConfig
from .topology import Endpoint

log = logging.getLogger(__name__)


@dataclass
class NodeConfig:
    kind: str  # "peer" | "orderer"
    name: str
    org: str
    host: str
    port: int
    node_dir: str
    identity_path: str
    roots_path: str
    crl_path: str
    batch: BatchConfig
    orderers: list[Endpoint]
    peers: list[Endpoint]
    policy_orgs: list[str]
    inter_org_delay_ms: float = 0.0
    confirmation_threshold: float = 1.0
    submit_timeout_ms: int = 30_000
    aux_port: int = 0
    aux_dir: Optional[str] = None
    election_timeout_ms: tuple[int, int] = (1000, 2000)
    heartbeat_ms: int = 150
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "org": self.org,
            "host": self.host,
            "port": self.port,
            "nodeDir": self.node_dir,
            "identity": self.identity_path,
            "roots": self.roots_path,
            "crl": self.crl_path,
            "batch": self.batch.to_dict(),
            "orderers": [e.to_dict() for e in self.orderers],
            "peers": [e.to_dict() for e in self.peers],
            "policyOrgs": list(self.policy_orgs),
            "interOrgDelayMs": self.inter_org_delay_ms,
            "confirmationThreshold": self.confirmation_threshold,
            "submitTimeoutMs": self.submit_timeout_ms,
            "auxPort": self.aux_port,
            "auxDir": self.aux_dir,
            "electionTimeoutMs": list(self.election_timeout_ms),
            "heartbeatMs": self.heartbeat_ms,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodeConfig":
        return cls(
            kind=d["kind"],
            name=d["name"],
            org=d["org"],
            host=d["host"],
            port=int(d["port"]),
            node_dir=d["nodeDir"],
            identity_path=d["identity"],
            roots_path=d["roots"],
            crl_path=d["crl"],
            batch=BatchConfig.from_dict(d["batch"]),
            orderers=[Endpoint.from_dict(e) for e in d["orderers"]],
            peers=[Endpoint.from_dict(e) for e in d["peers"]],
            policy_orgs=list(d["policyOrgs"]),
            inter_org_delay_ms=float(d.get("interOrgDelayMs", 0)),
            confirmation_threshold=float(d.get("confirmationThreshold", 1.0)),
            submit_timeout_ms=int(d.get("submitTimeoutMs", 30_000)),
            aux_port=int(d.get("auxPort", 0)),
            aux_dir=d.get("auxDir"),
            election_timeout_ms=tuple(d.get("electionTimeoutMs", (1000, 2000))),
            heartbeat_ms=int(d.get("heartbeatMs", 150)),
            extra=d.get("extra", {}),
        )

    @classmethod
    def load(cls, path) -> "NodeConfig":
        return cls.from_dict(canonical.load_file(path))

    def load_identity(self) -> Identity:
        return Identity.from_dict(canonical.load_file(self.identity_path))

    def load_directory(self) -> MembershipDirectory:
        return MembershipDirectory.load(self.roots_path, self.crl_path)

    @property
    def chain_path(self) -> str:
        return os.path.join(self.node_dir, "chain.blocks")

    def delay_for(self, cert: Certificate) -> float:
        """One-way delay applied on links between node identities of different orgs."""
        if self.inter_org_delay_ms <= 0 or cert.org_id == self.org:
            return 0.0
        if cert.role.value != "admin":
            return 0.0  # client links are local to their gateway
        return self.inter_org_delay_ms / 1000.0

    def delay_to(self, org: str) -> float:
        if self.inter_org_delay_ms <= 0 or org == self.org:
            return 0.0
        return self.inter_org_delay_ms / 1000.0


class DirectoryWatcher:
    """Polls the roots/CRL files and hands a fresh directory to *on_change*.

    Revocations written by ``identity revoke`` reach running nodes this way.
    """

    def __init__(self, roots_path: str, crl_path: str, on_change: Callable[[MembershipDirectory], None],
                 period: float = 0.25):
        self.roots_path = roots_path
        self.crl_path = crl_path
        self.on_change = on_change
        self.period = period
        self._stamp = self._mtimes()
        self._task: Optional[asyncio.Task] = None

    def _mtimes(self):
        out = []
        for p in (self.roots_path, self.crl_path):
            try:
                st = os.stat(p)
                out.append((st.st_mtime_ns, st.st_size, st.st_ino))
            except FileNotFoundError:
                out.append(None)
        return tuple(out)

    def start(self) -> None:
        self._task = asyncio.get_running_loop().create_task(self._run())

    def stop(self) -> None:
        if self._task:
            self._task.cancel()

    def poll(self) -> bool:
        stamp = self._mtimes()
        if stamp == self._stamp:
            return False
        try:
            directory = MembershipDirectory.load(self.roots_path, self.crl_path)
        except (OSError, ValueError) as exc:
            log.warning("membership files unreadable, keeping previous: %s", exc)
            return False
        self._stamp = stamp
        self.on_change(directory)
        return True

    async def _run(self) -> None:
        while True:
            await asyncio.sleep(self.period)
            self.poll()


_proc: Optional[psutil.Process] = None


def resource_stats() -> dict:
    """Cumulative process counters; callers difference successive samples."""
    global _proc
    if _proc is None:
        _proc = psutil.Process()
    cpu = _proc.cpu_times()
    out = {
        "pid": _proc.pid,
        "cpuSeconds": cpu.user + cpu.system,
        "rssBytes": _proc.memory_info().rss,
        "netInBytes": wire.traffic.bytes_in,
        "netOutBytes": wire.traffic.bytes_out,
        "framesIn": wire.traffic.frames_in,
        "framesOut": wire.traffic.frames_out,
    }
    try:
        io = _proc.io_counters()
        out["ioReadBytes"] = io.read_bytes
        out["ioWriteBytes"] = io.write_bytes
    except (psutil.AccessDenied, AttributeError, NotImplementedError):
        pass
    return out


def run_node(start: Callable[[], Awaitable[None]], stop: Callable[[], Awaitable[None]]) -> None:
    """Run until SIGTERM/SIGINT, then await *stop* for a clean flush."""

    async def main():
        done = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, done.set)
        await start()
        await done.wait()
        await stop()

    asyncio.run(main())
