"""Bootstrap a consortium into a data directory and run its nodes as local processes."""

from __future__ import annotations

import asyncio
import fcntl
import logging
import os
import signal
import socket
import subprocess
import sys
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import canonical
from .errors import PlatformError, ValidationError
from .identity import (
    CertificateAuthority,
    Identity,
    MembershipDirectory,
    Role,
    Wallet,
    build_directory,
    default_validity,
    issue_from_ca_file,
    revoke_identity,
)
from .ledger import BlockStore, genesis_block, verify_chain_file
from .noderuntime import NodeConfig
from .topology import (
    ORDERER_ORG,
    Endpoint,
    Layout,
    TopologyConfig,
    aux_host_peer,
    orderer_endpoints,
    peer_endpoints,
)

log = logging.getLogger(__name__)


class NetworkError(PlatformError):
    code = "NETWORK_ERROR"


@dataclass
class NetworkInfo:
    """What a client needs to reach a running network (read from ``network.json``)."""

    root: Path
    peers: list[Endpoint]
    orderers: list[Endpoint]
    aux: Optional[Endpoint]
    policy_orgs: list[str]
    topology: dict

    @property
    def layout(self) -> Layout:
        return Layout(self.root)

    @classmethod
    def load(cls, data_dir) -> "NetworkInfo":
        root = Path(data_dir)
        path = Layout(root).network
        if not path.exists():
            raise ValidationError(f"{root} holds no bootstrapped network (missing {path.name})")
        d = canonical.load_file(path)
        return cls(
            root=root,
            peers=[Endpoint.from_dict(e) for e in d["peers"]],
            orderers=[Endpoint.from_dict(e) for e in d["orderers"]],
            aux=None if d.get("aux") is None else Endpoint.from_dict(d["aux"]),
            policy_orgs=list(d["policyOrgs"]),
            topology=d["topology"],
        )

    def peer(self, name: str) -> Endpoint:
        for e in self.peers:
            if e.name == name:
                return e
        raise ValidationError(f"no peer named {name}")

    def peers_of(self, org: str) -> list[Endpoint]:
        return [e for e in self.peers if e.org == org]

    def wallet(self) -> Wallet:
        return Wallet.load(self.layout.wallet)

    def directory(self) -> MembershipDirectory:
        return MembershipDirectory.load(self.layout.roots, self.layout.crl)

    def node_names(self) -> list[str]:
        return [e.name for e in self.peers] + [e.name for e in self.orderers]


# -- bootstrap ---------------------------------------------------------------------

def bootstrap(cfg: TopologyConfig) -> NetworkInfo:
    """Create CAs, node identities, per-node configs and genesis blocks."""
    layout = Layout(Path(cfg.data_dir))
    (layout.root / "msp").mkdir(parents=True, exist_ok=True)
    now = canonical.utcnow()
    orgs = [o.name for o in cfg.orgs] + [ORDERER_ORG]
    cas = {org: CertificateAuthority.create(org, now=now) for org in orgs}
    build_directory(cas.values()).save(layout.roots, layout.crl)

    validity = default_validity(now, days=3650)
    wallet = Wallet()
    for org in orgs:
        wallet.put(f"admin@{org}", cas[org].issue(f"admin@{org}", Role.ADMIN, *validity))
    wallet.save(layout.wallet)

    peers = peer_endpoints(cfg)
    orderers = orderer_endpoints(cfg)
    aux_peer = aux_host_peer(cfg)
    for ep in peers + orderers:
        node_dir = layout.node_dir(ep.name)
        node_dir.mkdir(parents=True, exist_ok=True)
        ident = cas[ep.org].issue(ep.name, Role.ADMIN, *validity)
        ident_path = node_dir / "identity.json"
        canonical.dump_file(ident_path, ident.to_dict())
        chain = layout.chain(ep.name)
        if chain.exists():
            chain.unlink()
        BlockStore(chain).append(genesis_block())
        is_aux = ep.name == aux_peer
        nc = NodeConfig(
            kind="orderer" if ep.org == ORDERER_ORG else "peer",
            name=ep.name,
            org=ep.org,
            host=ep.host,
            port=ep.port,
            node_dir=str(node_dir),
            identity_path=str(ident_path),
            roots_path=str(layout.roots),
            crl_path=str(layout.crl),
            batch=cfg.ordering.batch,
            orderers=orderers,
            peers=peers,
            policy_orgs=list(cfg.policy_orgs),
            inter_org_delay_ms=cfg.inter_org_delay_ms,
            confirmation_threshold=cfg.confirmation_threshold,
            submit_timeout_ms=cfg.submit_timeout_ms,
            aux_port=cfg.aux_port if is_aux else 0,
            aux_dir=str(layout.aux) if is_aux else None,
        )
        canonical.dump_file(layout.node_config(ep.name), nc.to_dict())

    for org, ca in cas.items():
        canonical.dump_file(layout.ca(org), ca.to_dict())
    aux = None
    if aux_peer:
        aux = Endpoint("aux", peers[0].org, cfg.host, cfg.aux_port)
    canonical.dump_file(layout.network, {
        "peers": [e.to_dict() for e in peers],
        "orderers": [e.to_dict() for e in orderers],
        "aux": None if aux is None else aux.to_dict(),
        "policyOrgs": list(cfg.policy_orgs),
        "topology": cfg.to_dict(),
    })
    return NetworkInfo.load(layout.root)


# -- identity administration ---------------------------------------------------------

@contextmanager
def _locked(path: Path):
    with open(path.with_suffix(".lock"), "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        yield


def issue(info: NetworkInfo, org: str, subject: str, role: Role | str = Role.WRITER,
          label: str | None = None, overwrite: bool = False, days: int = 365) -> tuple[str, Identity]:
    """Issue an identity from the org's CA and store it in the network wallet."""
    if not info.layout.ca(org).exists():
        raise ValidationError(f"unknown org {org!r}")
    ident = issue_from_ca_file(info.layout.ca(org), subject, role, default_validity(days=days))
    label = label or f"{subject}@{org}"
    with _locked(info.layout.wallet):
        wallet = info.wallet()
        wallet.put(label, ident, overwrite=overwrite)
        wallet.save(info.layout.wallet)
    return label, ident


def revoke(info: NetworkInfo, org: str, serial: int) -> MembershipDirectory:
    """Add ``serial`` to the org's CRL; running nodes pick the change up by polling."""
    with _locked(info.layout.crl):
        updated = revoke_identity(info.directory(), org, serial)
        updated.save(info.layout.roots, info.layout.crl)
    return updated


def is_revoked(info: NetworkInfo, ident: Identity) -> bool:
    return info.directory().is_revoked(ident.org_id, ident.certificate.serial)


# -- processes ---------------------------------------------------------------------

def _port_free(host: str, port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind((host, port))
        except OSError:
            return False
    return True


def _port_open(host: str, port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.settimeout(0.2)
        return s.connect_ex((host, port)) == 0


def _read_pids(layout: Layout) -> dict[str, int]:
    if not layout.pids.exists():
        return {}
    return {k: int(v) for k, v in canonical.load_file(layout.pids).items()}


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    try:  # reap if it is our child
        done, _ = os.waitpid(pid, os.WNOHANG)
        return done == 0
    except ChildProcessError:
        return True


def spawn_node(info: NetworkInfo, name: str) -> subprocess.Popen:
    layout = info.layout
    logf = open(layout.log(name), "ab")
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    proc = subprocess.Popen(
        [sys.executable, "-m", "chainiot.node", str(layout.node_config(name))],
        stdout=logf, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL,
        start_new_session=True, env=env,
    )
    logf.close()
    pids = _read_pids(layout)
    pids[name] = proc.pid
    canonical.dump_file(layout.pids, pids)
    return proc


def _ports_of(info: NetworkInfo, name: str) -> list[tuple[str, int]]:
    eps = [e for e in info.peers + info.orderers if e.name == name]
    out = [(e.host, e.port) for e in eps]
    if info.aux is not None and name == info.peers[0].name:
        out.append((info.aux.host, info.aux.port))
    return out


def wait_listening(info: NetworkInfo, names, procs: dict[str, subprocess.Popen] | None = None,
                   timeout: float = 30.0) -> None:
    deadline = time.monotonic() + timeout
    pending = {n: _ports_of(info, n) for n in names}
    while pending:
        for n in list(pending):
            if procs and procs.get(n) is not None and procs[n].poll() is not None:
                raise NetworkError(f"{n} exited during startup (see {info.layout.log(n)})")
            if all(_port_open(h, p) for h, p in pending[n]):
                del pending[n]
        if time.monotonic() > deadline:
            raise NetworkError(f"nodes not listening after {timeout}s: {sorted(pending)}")
        time.sleep(0.05)


def network_up(cfg: TopologyConfig, fresh: bool = True, wait_leader: bool = True) -> NetworkInfo:
    layout = Layout(Path(cfg.data_dir))
    running = {n: p for n, p in _read_pids(layout).items() if _alive(p)}
    if running:
        raise NetworkError(f"network in {cfg.data_dir} is already running ({len(running)} processes)")
    ports = [(cfg.host, p) for o in cfg.orgs for p in o.gateway_ports] + [(cfg.host, p) for p in cfg.ordering.ports]
    if cfg.aux_port:
        ports.append((cfg.host, cfg.aux_port))
    busy = [p for h, p in ports if not _port_free(h, p)]
    if busy:
        raise NetworkError(f"ports already in use: {busy}")
    if fresh or not layout.network.exists():
        info = bootstrap(cfg)
    else:
        info = NetworkInfo.load(layout.root)
    if layout.pids.exists():
        layout.pids.unlink()
    procs: dict[str, subprocess.Popen] = {}
    try:
        # orderers first so peers find a Deliver endpoint straight away
        for name in [e.name for e in info.orderers] + [e.name for e in info.peers]:
            procs[name] = spawn_node(info, name)
        wait_listening(info, list(procs), procs)
        if wait_leader:
            asyncio.run(wait_for_leader(info))
    except BaseException:
        for p in procs.values():
            _terminate(p.pid, hard=True)
        if layout.pids.exists():
            layout.pids.unlink()
        raise
    return info


def _terminate(pid: int, hard: bool = False) -> None:
    try:
        os.kill(pid, signal.SIGKILL if hard else signal.SIGTERM)
    except ProcessLookupError:
        pass


def kill_node(info: NetworkInfo, name: str) -> None:
    """Hard-kill one node (crash simulation)."""
    pids = _read_pids(info.layout)
    pid = pids.get(name)
    if pid is None:
        raise ValidationError(f"no running node {name}")
    _terminate(pid, hard=True)
    deadline = time.monotonic() + 5
    while _alive(pid) and time.monotonic() < deadline:
        time.sleep(0.02)


def restart_node(info: NetworkInfo, name: str) -> None:
    proc = spawn_node(info, name)
    wait_listening(info, [name], {name: proc})


def network_down(data_dir, timeout: float = 15.0) -> list[str]:
    layout = Layout(Path(data_dir))
    pids = _read_pids(layout)
    for pid in pids.values():
        _terminate(pid)
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline and any(_alive(p) for p in pids.values()):
        time.sleep(0.05)
    stuck = [n for n, p in pids.items() if _alive(p)]
    for n in stuck:
        _terminate(pids[n], hard=True)
    if layout.pids.exists():
        layout.pids.unlink()
    return sorted(pids)


async def node_call(info: NetworkInfo, endpoint: Endpoint, msg_type: str, payload: dict | None = None,
                    identity: Identity | None = None, timeout: float = 5.0):
    from .wire import RpcClient

    ident = identity or info.wallet().get(f"admin@{info.peers[0].org}")
    c = await RpcClient.open(endpoint.host, endpoint.port, ident, timeout=timeout)
    try:
        return await c.call(msg_type, payload or {}, timeout=timeout)
    finally:
        await c.close()


async def wait_for_leader(info: NetworkInfo, timeout: float = 30.0) -> str:
    loop = asyncio.get_running_loop()
    deadline = loop.time() + timeout
    while loop.time() < deadline:
        for ep in info.orderers:
            try:
                st = await node_call(info, ep, "Stats", timeout=1.0)
            except PlatformError:
                continue
            if st["role"] == "leader":
                return ep.name
        await asyncio.sleep(0.1)
    raise NetworkError("no ordering leader elected")


# -- offline ledger inspection ----------------------------------------------------

@dataclass
class ChainReport:
    node: str
    height: int
    head_hash: str
    first_bad: Optional[int]
    diverges_at: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.first_bad is None and self.diverges_at is None

    def to_dict(self) -> dict:
        return {"node": self.node, "height": self.height, "headHash": self.head_hash,
                "firstBad": self.first_bad, "divergesAt": self.diverges_at, "ok": self.ok}


def verify_ledgers(data_dir, nodes=None) -> list[ChainReport]:
    """Walk each node's block file and check that all chains agree on their common prefix."""
    info = NetworkInfo.load(data_dir)
    names = list(nodes) if nodes else info.node_names()
    reports, chains = [], {}
    for name in names:
        path = info.layout.chain(name)
        if not path.exists():
            raise ValidationError(f"no chain file for {name}")
        bad = verify_chain_file(path)
        if bad is None:
            store = BlockStore(path)
            chains[name] = store.hashes()
            reports.append(ChainReport(name, store.height, store.head_hash.hex(), None))
        else:
            reports.append(ChainReport(name, bad, "", bad))
    depth = max((len(c) for c in chains.values()), default=0)
    by_node = {r.node: r for r in reports}
    for i in range(depth):
        votes = Counter(c[i] for c in chains.values() if len(c) > i)
        (top, n), *rest = votes.most_common()
        tied = bool(rest) and rest[0][1] == n
        for name, c in chains.items():
            r = by_node[name]
            if r.diverges_at is None and len(c) > i and (tied or c[i] != top):
                r.diverges_at = i
    return reports
