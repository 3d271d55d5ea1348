"""Gateway: evaluate on one peer, or endorse on every policy org, order, and await commits."""

from __future__ import annotations

import asyncio
import itertools
import logging
import math
import random
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .. import wire
from ..contracts import READ_OPERATIONS, WRITE_OPERATIONS
from ..errors import (
    AccessDenied,
    AllPeersUnavailable,
    CertificateError,
    ContractError,
    EndorsementFailure,
    InvalidProposal,
    MessageTooLarge,
    NoQuorum,
    NotLeader,
    PlatformError,
    StreamClosed,
    Timeout,
    UnknownOperation,
    ValidationError,
)
from ..execution import EndorsementPolicy, Peer, Proposal, ProposalResponse, assemble_transaction
from ..identity import Identity
from ..ledger import ValidationCode
from ..topology import Endpoint

log = logging.getLogger(__name__)

# errors that describe the proposal itself; another peer would answer the same
_DEFINITIVE = (ContractError, ValidationError, CertificateError, InvalidProposal, UnknownOperation)


class LocalPeer:
    """The peer embedded in this process."""

    def __init__(self, peer: Peer):
        self.peer = peer
        self.name = peer.name
        self.org = peer.org_id

    async def endorse(self, proposal: Proposal) -> ProposalResponse:
        return self.peer.simulate(proposal)


class RemotePeer:
    """Another peer reached over the wire, lazily (re)connected."""

    def __init__(self, endpoint: Endpoint, identity: Identity, delay: float = 0.0, timeout: float = 10.0):
        self.endpoint = endpoint
        self.name = endpoint.name
        self.org = endpoint.org
        self.identity = identity
        self.delay = delay
        self.timeout = timeout
        self._client: Optional[wire.RpcClient] = None
        self._lock = asyncio.Lock()
        self.down_until = 0.0

    async def client(self) -> wire.RpcClient:
        if self._client is not None and not self._client.is_closed:
            return self._client
        async with self._lock:
            if self._client is None or self._client.is_closed:
                ep = self.endpoint
                self._client = await wire.RpcClient.open(ep.host, ep.port, self.identity, self.delay, timeout=2.0)
            return self._client

    async def endorse(self, proposal: Proposal) -> ProposalResponse:
        c = await self.client()
        res = await c.call("Endorse", {"proposal": proposal.to_dict()}, timeout=self.timeout)
        return ProposalResponse.from_dict(res)

    async def close(self) -> None:
        if self._client is not None:
            await self._client.close()


class OrdererClient:
    """Broadcasts to whichever ordering node currently leads, following redirects."""

    def __init__(self, endpoints: Sequence[Endpoint], identity: Identity, delay_to: Callable[[str], float] = lambda o: 0.0):
        self.endpoints = {e.name: e for e in endpoints}
        self.order = [e.name for e in endpoints]
        self.identity = identity
        self.delay_to = delay_to
        self.leader: Optional[str] = None
        self._clients: dict[str, wire.RpcClient] = {}
        self._locks: dict[str, asyncio.Lock] = {}
        self._watchers: dict[str, asyncio.Task] = {}
        self.changed = asyncio.Event()  # set whenever the leader or a connection changes
        self.broadcasts = 0

    def _signal(self) -> None:
        ev, self.changed = self.changed, asyncio.Event()
        ev.set()

    async def _client(self, name: str) -> wire.RpcClient:
        c = self._clients.get(name)
        if c is not None and not c.is_closed:
            return c
        lock = self._locks.setdefault(name, asyncio.Lock())
        async with lock:
            c = self._clients.get(name)
            if c is None or c.is_closed:
                ep = self.endpoints[name]
                c = await wire.RpcClient.open(ep.host, ep.port, self.identity, self.delay_to(ep.org), timeout=2.0)
                self._clients[name] = c
                self._watchers[name] = asyncio.get_running_loop().create_task(self._watch(name, c))
            return c

    async def _watch(self, name: str, c: wire.RpcClient) -> None:
        await c.closed.wait()
        if self.leader == name:
            self.leader = None
        self._signal()

    async def broadcast(self, tx: dict, deadline: float) -> str:
        loop = asyncio.get_running_loop()
        candidates = itertools.cycle(self.order)
        attempts = 0
        while True:
            name = self.leader or next(candidates)
            try:
                c = await self._client(name)
                self.broadcasts += 1
                res = await c.call("Broadcast", {"tx": tx}, timeout=5.0)
                if self.leader != name:
                    self.leader = name
                    self._signal()
                return res["status"]
            except NotLeader as err:
                hint = err.leader if err.leader in self.endpoints and err.leader != name else None
                if self.leader is not None or hint:
                    self._signal()
                self.leader = hint
            except MessageTooLarge:
                raise
            except (StreamClosed, Timeout, OSError) as err:
                log.debug("orderer %s unavailable: %s", name, err)
                if self.leader == name:
                    self.leader = None
                    self._signal()
            attempts += 1
            if loop.time() >= deadline:
                raise NoQuorum("no ordering leader reachable before the submit deadline")
            if attempts % len(self.order) == 0 or self.leader is None:
                await asyncio.sleep(min(0.5, 0.05 * attempts) * random.uniform(0.5, 1.0))

    async def close(self) -> None:
        for t in self._watchers.values():
            t.cancel()
        for c in self._clients.values():
            await c.close()


@dataclass
class _Waiter:
    needed: int
    future: asyncio.Future
    seen: dict  # peer name -> (code, block)


class CommitTracker:
    """Resolves each submitted txId once the required number of peers report its commit."""

    def __init__(self):
        self.waiters: dict[str, _Waiter] = {}

    def register(self, tx_id: str, needed: int) -> asyncio.Future:
        if tx_id in self.waiters:
            raise ValidationError(f"transaction {tx_id} is already being submitted")
        fut = asyncio.get_running_loop().create_future()
        self.waiters[tx_id] = _Waiter(needed, fut, {})
        return fut

    def forget(self, tx_id: str) -> None:
        self.waiters.pop(tx_id, None)

    def report(self, peer: str, tx_id: str, code: str, block: int) -> None:
        w = self.waiters.get(tx_id)
        if w is None or peer in w.seen:
            return  # unknown, or a duplicate report from the same peer
        w.seen[peer] = (code, block)
        if len(w.seen) >= w.needed and not w.future.done():
            codes = {c for c, _ in w.seen.values()}
            if len(codes) > 1:
                log.error("peers disagree on %s: %s", tx_id, w.seen)
            # the first reporter's verdict; peers validate deterministically
            first = next(iter(w.seen.values()))
            w.future.set_result(first)
            del self.waiters[tx_id]


@dataclass
class SubmitResult:
    tx_id: str
    code: ValidationCode
    block: int
    result: bytes

    def to_dict(self) -> dict:
        from ..canonical import b64e

        return {"txId": self.tx_id, "validationCode": self.code.value, "blockNumber": self.block,
                "result": b64e(self.result)}


class Gateway:
    def __init__(
        self,
        local: Peer,
        remotes: Sequence[RemotePeer],
        policy: EndorsementPolicy,
        orderer: OrdererClient,
        tracker: CommitTracker,
        tracked_peers: int,
        threshold: float = 1.0,
        submit_timeout: float = 30.0,
        resubmit_interval: float = 5.0,
    ):
        self.local = local
        self.policy = policy
        self.orderer = orderer
        self.tracker = tracker
        self.threshold = threshold
        self.submit_timeout = submit_timeout
        self.resubmit_interval = resubmit_interval
        self.by_org: dict[str, list] = {}
        for h in [LocalPeer(local), *remotes]:
            self.by_org.setdefault(h.org, []).append(h)
        self._rr = {org: itertools.count() for org in self.by_org}
        self.needed = max(1, math.ceil(threshold * tracked_peers - 1e-9))
        self.evaluations = 0
        self.submissions = 0

    def _candidates(self, org: str) -> list:
        handles = self.by_org.get(org, [])
        if not handles:
            return []
        start = next(self._rr[org]) % len(handles)
        rotated = handles[start:] + handles[:start]
        now = asyncio.get_running_loop().time()
        healthy = [h for h in rotated if getattr(h, "down_until", 0.0) <= now]
        return healthy + [h for h in rotated if h not in healthy]

    async def _endorse_in_org(self, org: str, proposal: Proposal) -> ProposalResponse:
        last: Optional[BaseException] = None
        for h in self._candidates(org):
            try:
                return await h.endorse(proposal)
            except _DEFINITIVE:
                raise
            except (PlatformError, OSError) as err:
                last = err
            if isinstance(h, RemotePeer):
                h.down_until = asyncio.get_running_loop().time() + 2.0
        raise AllPeersUnavailable(f"no peer of {org} could simulate the proposal: {last}")

    def _authorize(self, proposal: Proposal):
        caller = self.local.authenticate(proposal)
        if proposal.contract_op not in READ_OPERATIONS and proposal.contract_op not in WRITE_OPERATIONS:
            raise UnknownOperation(f"unknown operation {proposal.contract_op!r}")
        return caller

    async def evaluate(self, proposal: Proposal) -> bytes:
        caller = self._authorize(proposal)
        if proposal.contract_op not in READ_OPERATIONS:
            raise ValidationError(f"{proposal.contract_op} mutates state; use Submit")
        self.evaluations += 1
        if caller.org_id == self.local.org_id:
            return self.local.simulate(proposal).result_payload
        resp = await self._endorse_in_org(caller.org_id, proposal)
        return resp.result_payload

    async def endorse(self, proposal: Proposal) -> tuple[list[ProposalResponse], list]:
        orgs = sorted(self.policy.org_set)
        results = await asyncio.gather(*(self._endorse_in_org(o, proposal) for o in orgs), return_exceptions=True)
        ok = [r for r in results if isinstance(r, ProposalResponse)]
        errors = [r for r in results if not isinstance(r, ProposalResponse)]
        for e in errors:
            if isinstance(e, _DEFINITIVE):
                raise e
        if not self.policy.satisfied_by(r.endorser_cert.org_id for r in ok):
            raise EndorsementFailure(f"endorsement policy needs {self.policy.required} orgs; collected {len(ok)}: "
                                     + "; ".join(str(e) for e in errors))
        return ok, errors

    async def submit(self, proposal: Proposal) -> SubmitResult:
        caller = self._authorize(proposal)
        if not caller.role.can_write:
            raise AccessDenied(f"role {caller.role.value!r} may not submit transactions")
        if proposal.contract_op not in WRITE_OPERATIONS:
            raise ValidationError(f"{proposal.contract_op} is read-only; use Evaluate")
        self.submissions += 1
        responses, _ = await self.endorse(proposal)
        tx = assemble_transaction(responses, proposal)
        loop = asyncio.get_running_loop()
        deadline = loop.time() + self.submit_timeout
        fut = self.tracker.register(tx.tx_id, self.needed)
        try:
            wire_tx = tx.to_dict()
            await self.orderer.broadcast(wire_tx, deadline)
            while True:
                changed = self.orderer.changed
                remaining = deadline - loop.time()
                if remaining <= 0:
                    raise Timeout(f"transaction {tx.tx_id} not confirmed within {self.submit_timeout}s")
                waiter = loop.create_task(changed.wait())
                try:
                    done, _ = await asyncio.wait({fut, waiter}, timeout=min(remaining, self.resubmit_interval),
                                                 return_when=asyncio.FIRST_COMPLETED)
                finally:
                    waiter.cancel()
                if fut in done:
                    code, block = fut.result()
                    return SubmitResult(tx.tx_id, ValidationCode(code), block, tx.result_payload)
                # leader change, dropped connection or a quiet interval: resubmit; ordering dedups by txId
                try:
                    await self.orderer.broadcast(wire_tx, deadline)
                except NoQuorum:
                    continue
        finally:
            self.tracker.forget(tx.tx_id)
