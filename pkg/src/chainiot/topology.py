"""Topology files: what to run, on which ports, and the per-node configs derived from it.

Topology and node files use the same canonical text encoding as the wire.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import canonical
from .errors import ValidationError
from .ordering.cutter import BatchConfig

ORDERER_ORG = "orderer"


@dataclass(frozen=True)
class OrgSpec:
    name: str
    peers: int = 2
    gateway_ports: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"name": self.name, "peers": self.peers, "gatewayPorts": list(self.gateway_ports)}


@dataclass(frozen=True)
class OrderingSpec:
    mode: str = "replicated"
    node_count: int = 3
    ports: tuple[int, ...] = ()
    batch: BatchConfig = field(default_factory=BatchConfig)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "nodeCount": self.node_count, "ports": list(self.ports), "batch": self.batch.to_dict()}


@dataclass(frozen=True)
class TopologyConfig:
    orgs: tuple[OrgSpec, ...]
    ordering: OrderingSpec
    policy_orgs: tuple[str, ...]
    data_dir: str
    host: str = "127.0.0.1"
    aux_port: int = 0
    inter_org_delay_ms: float = 0.0
    confirmation_threshold: float = 1.0
    submit_timeout_ms: int = 30_000

    def __post_init__(self):
        validate(self)

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "orgs": [o.to_dict() for o in self.orgs],
            "ordering": self.ordering.to_dict(),
            "policy": {"orgs": list(self.policy_orgs), "rule": "MAJORITY"},
            "dataDir": self.data_dir,
            "host": self.host,
            "auxPort": self.aux_port,
            "interOrgDelayMs": self.inter_org_delay_ms,
            "confirmationThreshold": self.confirmation_threshold,
            "submitTimeoutMs": self.submit_timeout_ms,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike | None = None) -> "TopologyConfig":
        try:
            orgs = tuple(
                OrgSpec(str(o["name"]), int(o.get("peers", 2)), tuple(int(p) for p in o.get("gatewayPorts", ())))
                for o in d["orgs"]
            )
            o = d.get("ordering", {})
            ordering = OrderingSpec(
                mode=str(o.get("mode", "replicated")),
                node_count=int(o.get("nodeCount", 1 if o.get("mode") == "solo" else 3)),
                ports=tuple(int(p) for p in o.get("ports", ())),
                batch=BatchConfig.from_dict(o.get("batch", {})),
            )
            policy = d.get("policy", {})
            if policy.get("rule", "MAJORITY") != "MAJORITY":
                raise ValidationError(f"unsupported endorsement rule {policy.get('rule')!r}")
            data_dir = str(d.get("dataDir", "chainiot-data"))
            if base_dir is not None and not os.path.isabs(data_dir):
                data_dir = os.path.join(base_dir, data_dir)
            return cls(
                orgs=orgs,
                ordering=ordering,
                policy_orgs=tuple(policy.get("orgs", [org.name for org in orgs])),
                data_dir=data_dir,
                host=str(d.get("host", "127.0.0.1")),
                aux_port=int(d.get("auxPort", 0)),
                inter_org_delay_ms=float(d.get("interOrgDelayMs", 0)),
                confirmation_threshold=float(d.get("confirmationThreshold", 1.0)),
                submit_timeout_ms=int(d.get("submitTimeoutMs", 30_000)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"bad topology: {exc!r}") from None

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TopologyConfig":
        try:
            d = canonical.load_file(path)
        except ValueError as exc:
            raise ValidationError(f"{path}: not valid JSON: {exc}") from None
        return cls.from_dict(d, base_dir=os.path.dirname(os.path.abspath(path)))

    def save(self, path) -> None:
        canonical.dump_file(path, self.to_dict())


def validate(cfg: TopologyConfig) -> None:
    if not cfg.orgs:
        raise ValidationError("at least one org is required")
    names = [o.name for o in cfg.orgs]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate org name")
    if ORDERER_ORG in names:
        raise ValidationError(f"org name {ORDERER_ORG!r} is reserved")
    for o in cfg.orgs:
        if not o.name or "/" in o.name:
            raise ValidationError(f"bad org name {o.name!r}")
        if o.peers < 1:
            raise ValidationError(f"org {o.name} needs at least one peer")
        if len(o.gateway_ports) != o.peers:
            raise ValidationError(f"org {o.name}: need one gateway port per peer")
    mode = cfg.ordering.mode
    if mode == "solo":
        if cfg.ordering.node_count != 1:
            raise ValidationError("solo ordering runs exactly one node")
    elif mode == "replicated":
        n = cfg.ordering.node_count
        if n < 3 or n % 2 == 0:
            raise ValidationError("replicated ordering requires an odd node count >= 3")
    else:
        raise ValidationError(f"unknown ordering mode {mode!r}")
    if len(cfg.ordering.ports) != cfg.ordering.node_count:
        raise ValidationError("need one port per ordering node")
    if not set(cfg.policy_orgs) or not set(cfg.policy_orgs) <= set(names):
        raise ValidationError("endorsement policy must name existing orgs")
    if not 0 < cfg.confirmation_threshold <= 1:
        raise ValidationError("confirmationThreshold must be in (0, 1]")
    if cfg.inter_org_delay_ms < 0:
        raise ValidationError("interOrgDelayMs must be >= 0")
    ports = [p for o in cfg.orgs for p in o.gateway_ports] + list(cfg.ordering.ports)
    if cfg.aux_port:
        ports.append(cfg.aux_port)
    for p in ports:
        if not 0 < p < 65536:
            raise ValidationError(f"port {p} out of range")
    dupes = sorted({p for p in ports if ports.count(p) > 1})
    if dupes:
        raise ValidationError(f"duplicate port(s) in topology: {dupes}")


def default_topology(data_dir: str, base_port: int = 17050, solo: bool = False,
                     batch: BatchConfig | None = None, orgs: int = 2, peers: int = 2, **kw) -> TopologyConfig:
    """The two-org, two-peers-per-org, three-orderer layout (or a solo orderer)."""
    port = iter(range(base_port, base_port + 100))
    org_specs = tuple(OrgSpec(f"org{i + 1}", peers, tuple(next(port) for _ in range(peers))) for i in range(orgs))
    n = 1 if solo else 3
    ordering = OrderingSpec("solo" if solo else "replicated", n, tuple(next(port) for _ in range(n)),
                            batch or BatchConfig())
    return TopologyConfig(org_specs, ordering, tuple(o.name for o in org_specs), data_dir,
                          aux_port=next(port), **kw)


# -- derived layout -----------------------------------------------------------

@dataclass(frozen=True)
class Endpoint:
    name: str
    org: str
    host: str
    port: int

    def to_dict(self) -> dict:
        return {"name": self.name, "org": self.org, "host": self.host, "port": self.port}

    @classmethod
    def from_dict(cls, d: dict) -> "Endpoint":
        return cls(d["name"], d["org"], d["host"], int(d["port"]))


def peer_endpoints(cfg: TopologyConfig) -> list[Endpoint]:
    return [
        Endpoint(f"peer{i}.{o.name}", o.name, cfg.host, port)
        for o in cfg.orgs
        for i, port in enumerate(o.gateway_ports)
    ]


def orderer_endpoints(cfg: TopologyConfig) -> list[Endpoint]:
    return [Endpoint(f"orderer{i}", ORDERER_ORG, cfg.host, port) for i, port in enumerate(cfg.ordering.ports)]


@dataclass
class Layout:
    """Filesystem layout under the data directory."""

    root: Path

    @property
    def roots(self) -> Path:
        return self.root / "msp" / "roots.json"

    @property
    def crl(self) -> Path:
        return self.root / "msp" / "crl.json"

    def ca(self, org: str) -> Path:
        return self.root / "msp" / f"ca-{org}.json"

    @property
    def wallet(self) -> Path:
        return self.root / "wallet.json"

    @property
    def network(self) -> Path:
        return self.root / "network.json"

    @property
    def pids(self) -> Path:
        return self.root / "pids.json"

    @property
    def aux(self) -> Path:
        return self.root / "aux"

    def node_dir(self, name: str) -> Path:
        return self.root / "nodes" / name

    def node_config(self, name: str) -> Path:
        return self.node_dir(name) / "node.json"

    def chain(self, name: str) -> Path:
        return self.node_dir(name) / "chain.blocks"

    def log(self, name: str) -> Path:
        return self.node_dir(name) / "node.log"


def aux_host_peer(cfg: TopologyConfig) -> Optional[str]:
    """The peer process that also serves the blob store on ``auxPort``."""
    if not cfg.aux_port:
        return None
    return peer_endpoints(cfg)[0].name
