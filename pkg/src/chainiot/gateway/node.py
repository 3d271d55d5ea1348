"""Peer process: ledger, endorsement service, embedded gateway and event streams.

One listener serves both clients (Evaluate/Submit/Subscribe) and other nodes
(Endorse, Stats, Inspect).  Blocks arrive over a Deliver stream from any
ordering node; the stream is re-opened from the current height after a drop.
"""

from __future__ import annotations

import asyncio
import logging
import os
from typing import Optional

from .. import canonical, wire
from ..auxstore import BlobStore
from ..auxstore import handle as aux_handle
from ..canonical import b64e
from ..errors import AccessDenied, PlatformError, StreamClosed, ValidationError
from ..execution import EndorsementPolicy, Peer, Proposal
from ..identity import Role, check_issuer, derive_device_id, verify_certificate
from ..ledger import Block, BlockStore, WorldState, compute_data_hash, genesis_block
from ..noderuntime import DirectoryWatcher, NodeConfig, resource_stats
from ..topology import ORDERER_ORG
from .events import EventFilter, EventHub
from .gateway import CommitTracker, Gateway, OrdererClient, RemotePeer

log = logging.getLogger(__name__)

_FAR = 1 << 40


class PeerNode:
    def __init__(self, cfg: NodeConfig):
        self.cfg = cfg
        self.identity = cfg.load_identity()
        directory = cfg.load_directory()
        self.policy = EndorsementPolicy(frozenset(cfg.policy_orgs))
        os.makedirs(cfg.node_dir, exist_ok=True)
        self.store = BlockStore(cfg.chain_path)
        self.peer = Peer(self.identity, directory, self.policy, self.store)
        self.snapshot_path = os.path.join(cfg.node_dir, "state-snapshot.json")
        self._restore()
        self.watcher = DirectoryWatcher(cfg.roots_path, cfg.crl_path, self._set_directory)
        self.hub = EventHub(self.store)
        self.tracker = CommitTracker()
        self.peer.listeners.append(self._on_commit)
        self.endorsements = 0
        self.blocks_received = 0
        self.server: Optional[asyncio.base_events.Server] = None
        self.aux_server: Optional[asyncio.base_events.Server] = None
        self.aux = BlobStore(cfg.aux_dir) if cfg.aux_port and cfg.aux_dir else None
        self._tasks: list[asyncio.Task] = []

    # -- startup state ---------------------------------------------------------

    def _restore(self) -> None:
        if self.store.height == 0:
            self.peer.validate_and_commit(genesis_block())
            return
        snap = None
        if os.path.exists(self.snapshot_path):
            try:
                snap = canonical.load_file(self.snapshot_path)
            except (OSError, ValueError):
                snap = None
        if snap and snap.get("height") == self.store.height and snap.get("headHash") == self.store.head_hash.hex():
            self.peer.state = WorldState.from_dict(snap["state"])
            self.peer.valid_tx_ids = set(snap["validTxIds"])
            log.info("%s: restored state snapshot at height %d", self.name, self.store.height)
        else:
            self.peer.load_chain(self.store)

    def write_snapshot(self) -> None:
        canonical.dump_file(self.snapshot_path, {
            "height": self.store.height,
            "headHash": self.store.head_hash.hex(),
            "state": self.peer.state.to_dict(),
            "validTxIds": sorted(self.peer.valid_tx_ids),
        })

    @property
    def name(self) -> str:
        return self.cfg.name

    def _set_directory(self, directory) -> None:
        self.peer.directory = directory

    # -- lifecycle ---------------------------------------------------------------

    async def start(self) -> None:
        cfg = self.cfg
        remotes = [RemotePeer(ep, self.identity, cfg.delay_to(ep.org)) for ep in cfg.peers if ep.name != cfg.name]
        self.remotes = remotes
        same_org = [r for r in remotes if r.org == cfg.org]
        self.orderer = OrdererClient(cfg.orderers, self.identity, cfg.delay_to)
        self.gateway = Gateway(
            self.peer, remotes, self.policy, self.orderer, self.tracker,
            tracked_peers=1 + len(same_org),
            threshold=cfg.confirmation_threshold,
            submit_timeout=cfg.submit_timeout_ms / 1000,
            resubmit_interval=max(5.0, 2.5 * cfg.batch.batch_timeout),
        )
        self.server = await wire.serve(cfg.host, cfg.port, self.identity, self.handle, delay_for=cfg.delay_for)
        if self.aux is not None:
            self.aux_server = await wire.serve(cfg.host, cfg.aux_port, self.identity, self.handle_aux)
        self.watcher.start()
        loop = asyncio.get_running_loop()
        self._tasks.append(loop.create_task(self._deliver_loop()))
        for r in same_org:
            self._tasks.append(loop.create_task(self._track_remote(r)))
        log.info("%s listening on %s:%d (height %d)", self.name, cfg.host, cfg.port, self.store.height)

    async def stop(self) -> None:
        self.watcher.stop()
        for t in self._tasks:
            t.cancel()
        for srv in (self.server, self.aux_server):
            if srv is not None:
                srv.close()
        await self.orderer.close()
        for r in self.remotes:
            await r.close()
        self.write_snapshot()

    # -- block intake ------------------------------------------------------------

    async def _deliver_loop(self) -> None:
        members = self.cfg.orderers
        idx = sum(self.name.encode()) % len(members)
        while True:
            ep = members[idx % len(members)]
            client = None
            try:
                client = await wire.RpcClient.open(ep.host, ep.port, self.identity, self.cfg.delay_to(ep.org), timeout=2.0)
                stream = await client.stream("Deliver", {"start": self.store.height}, timeout=5.0)
                async for msg in stream:
                    self._on_block(msg)
            except PlatformError as err:
                log.info("%s: deliver from %s ended: %s", self.name, ep.name, err)
            finally:
                if client is not None:
                    await client.close()
            idx += 1
            await asyncio.sleep(0.2)

    def _on_block(self, msg: wire.Message) -> None:
        if msg.sender.org_id != ORDERER_ORG:
            raise ValidationError("blocks must come from an ordering node")
        check_issuer(self.peer.directory, msg.sender)
        n = int(msg.payload["number"])
        if n < self.store.height:
            return  # already have it
        if n > self.store.height:
            raise StreamClosed(f"gap in delivered blocks: got {n}, at height {self.store.height}")
        block = Block.from_dict(msg.payload["block"])
        if compute_data_hash(block.transactions) != block.data_hash:
            raise StreamClosed(f"block {n} data hash does not match its transactions")
        self.peer.validate_and_commit(block)
        self.blocks_received += 1

    def _on_commit(self, block: Block) -> None:
        for index, tx in enumerate(block.transactions):
            self.tracker.report(self.name, tx.tx_id, block.metadata[index].value, block.number)
        self.hub.publish(block)

    async def _track_remote(self, remote: RemotePeer) -> None:
        """Follow a same-org peer's commits so submits can wait for the confirmation threshold."""
        cursor = [max(0, self.store.height - 1), _FAR]
        while True:
            client = None
            try:
                client = await wire.RpcClient.open(remote.endpoint.host, remote.endpoint.port, self.identity, timeout=2.0)
                stream = await client.stream("Subscribe", {"filter": {"all": True}, "cursor": cursor}, timeout=5.0)
                async for msg in stream:
                    ev = msg.payload["event"]
                    cursor = [ev["blockNumber"], ev["txIndex"]]
                    self.tracker.report(remote.name, ev["txId"], ev["validationCode"], ev["blockNumber"])
            except PlatformError as err:
                log.debug("%s: commit feed from %s ended: %s", self.name, remote.name, err)
            finally:
                if client is not None:
                    await client.close()
            await asyncio.sleep(0.25)

    # -- request handling ----------------------------------------------------------

    async def handle(self, conn: wire.ServerConnection, msg: wire.Message):
        t = msg.type
        p = msg.payload
        if t == "Evaluate":
            result = await self.gateway.evaluate(Proposal.from_dict(p["proposal"]))
            return {"result": b64e(result)}
        if t == "Submit":
            res = await self.gateway.submit(Proposal.from_dict(p["proposal"]))
            return res.to_dict()
        caller = verify_certificate(self.peer.directory, msg.sender, canonical.utcnow())
        if t == "Subscribe":
            return await self._subscribe(conn, msg, caller)
        if t == "Endorse":
            if caller.role is not Role.ADMIN:
                raise AccessDenied("only gateway nodes may request endorsements")
            self.endorsements += 1
            return self.peer.simulate(Proposal.from_dict(p["proposal"])).to_dict()
        if t == "Stats":
            return self.stats()
        if t == "Inspect":
            return self.inspect(bool(p.get("replay", False)))
        raise ValidationError(f"peer does not handle {t}")

    async def _subscribe(self, conn: wire.ServerConnection, msg: wire.Message, caller):
        flt = EventFilter.from_dict(msg.payload.get("filter") or {})
        if caller.role is not Role.ADMIN:
            own = derive_device_id(msg.sender)
            if flt.all:
                raise AccessDenied("only administrators may subscribe to every commit")
            if flt.device_id is not None and (flt.org_id, flt.device_id) != (caller.org_id, own):
                raise AccessDenied("devices may only subscribe to their own notifications")
            if flt.requester_id is not None and flt.requester_id != own:
                raise AccessDenied("requesters may only follow their own requests")
        raw = msg.payload.get("cursor")
        cursor = None if raw is None else (int(raw[0]), int(raw[1]))
        sub_id = msg.payload["id"]
        await conn.reply(msg, {"sub": sub_id, "height": self.store.height})

        async def send(ev):
            await conn.push("Event", sub_id, {"event": ev})

        async def fail(err):
            await conn.send("Error", {"id": sub_id, **err.to_wire()})

        sub = self.hub.subscribe(send, fail, flt, cursor)
        conn.on_close.append(sub.cancel)
        return wire.NO_REPLY

    async def handle_aux(self, conn: wire.ServerConnection, msg: wire.Message):
        caller = verify_certificate(self.peer.directory, msg.sender, canonical.utcnow())
        if msg.type == "AuxPut" and not caller.role.can_write:
            raise AccessDenied("reader role may not store blobs")
        return await aux_handle(self.aux, msg.type, msg.payload)

    def stats(self) -> dict:
        disk = self.store.bytes_written + (self.aux.bytes_written if self.aux else 0)
        return {
            **resource_stats(),
            "name": self.name,
            "kind": "peer",
            "height": self.store.height,
            "evaluations": self.gateway.evaluations,
            "submissions": self.gateway.submissions,
            "simulations": self.peer.simulations,
            "endorsements": self.endorsements,
            "orderingCalls": self.orderer.broadcasts,
            "subscribers": len(self.hub.subscribers),
            "diskWriteBytes": disk,
        }

    def inspect(self, replay: bool = False) -> dict:
        out = {
            "name": self.name,
            "height": self.store.height,
            "headHash": self.store.head_hash.hex(),
            "stateHash": self.peer.state.content_hash(),
        }
        if replay:
            state, codes = self.peer.replay_state()
            out["replayStateHash"] = state.content_hash()
            out["codesMatch"] = [[c.value for c in cs] for cs in codes] == [
                [c.value for c in b.metadata] for b in self.store
            ]
        return out
