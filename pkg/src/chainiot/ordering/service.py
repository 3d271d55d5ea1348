"""Ordering node: accepts endorsed transactions, cuts batches, replicates them, serves blocks.

Only the leader accepts ``Broadcast``.  Cut batches become replicated log
entries; every node turns committed entries into blocks deterministically
(block number = count of applied batches), so all nodes hold the same chain.
"""

from __future__ import annotations

import asyncio
import logging
import os
from typing import Optional, Sequence

from .. import canonical, wire
from ..errors import NotLeader, StreamClosed, ValidationError
from ..identity import Role, check_issuer, verify_certificate
from ..ledger import BlockStore, Transaction, encode_block, genesis_block, make_block
from ..noderuntime import DirectoryWatcher, NodeConfig, resource_stats
from ..topology import ORDERER_ORG
from .cutter import BlockCutter
from .raft import Entry, RaftNode, RaftStorage, RaftTiming, State

log = logging.getLogger(__name__)


def applied_index_for(entries: Sequence[Entry], batches_applied: int) -> int:
    """Log index of the *batches_applied*-th batch entry (no-ops carry no block)."""
    if batches_applied == 0:
        return 0
    seen = 0
    for i, e in enumerate(entries, start=1):
        if e.data is not None:
            seen += 1
            if seen == batches_applied:
                return i
    raise ValidationError("block store is ahead of the replicated log")


class OrdererNode:
    def __init__(self, cfg: NodeConfig):
        self.cfg = cfg
        self.identity = cfg.load_identity()
        self.directory = cfg.load_directory()
        self.watcher = DirectoryWatcher(cfg.roots_path, cfg.crl_path, self._set_directory)
        os.makedirs(cfg.node_dir, exist_ok=True)
        self.store = BlockStore(cfg.chain_path)
        if self.store.height == 0:
            self.store.append(genesis_block())
        self._encoded: dict[int, bytes] = {}
        self.cutter: BlockCutter = BlockCutter(cfg.batch)
        self.pending_ids: set[str] = set()
        self.log_ids: set[str] = set()
        self._parsed: dict[str, Transaction] = {}
        self.broadcasts = 0
        self.duplicates = 0
        self.blocks_cut = 0
        self._block_added: Optional[asyncio.Event] = None  # created on start
        self._clients: dict[str, wire.RpcClient] = {}
        self._connecting: dict[str, asyncio.Lock] = {}
        self.members = {e.name: e for e in cfg.orderers}
        storage = RaftStorage(os.path.join(cfg.node_dir, "raft"))
        timing = RaftTiming(
            election_timeout=(cfg.election_timeout_ms[0] / 1000, cfg.election_timeout_ms[1] / 1000),
            heartbeat=cfg.heartbeat_ms / 1000,
        )
        # peek at the persisted log to align it with blocks already built
        _, _, persisted = storage.load()
        applied = applied_index_for(persisted, self.store.height - 1)
        self.raft = RaftNode(
            cfg.name,
            list(self.members),
            storage,
            self._transport,
            self._apply,
            timing=timing,
            applied_index=applied,
            on_append=self._on_append,
            on_truncate=self._on_truncate,
            on_role_change=self._on_role_change,
        )
        self.server: Optional[asyncio.base_events.Server] = None
        self._tick_task: Optional[asyncio.Task] = None

    def _set_directory(self, directory) -> None:
        self.directory = directory

    # -- log bookkeeping ---------------------------------------------------------

    def _on_append(self, entries: Sequence[Entry]) -> None:
        for e in entries:
            if e.data is not None:
                self.log_ids.update(t["txId"] for t in e.data["txs"])

    def _on_truncate(self) -> None:
        self.log_ids = {t["txId"] for e in self.raft.log if e.data is not None for t in e.data["txs"]}

    def _on_role_change(self, state: State) -> None:
        if state is not State.LEADER:
            dropped = self.cutter.discard()
            self.pending_ids.clear()
            self._parsed.clear()
            if dropped:
                log.info("%s: dropped %d unordered envelopes on losing leadership", self.cfg.name, len(dropped))

    def _apply(self, index: int, entry: Entry) -> None:
        if entry.data is None:
            return
        txs = []
        for d in entry.data["txs"]:
            tx = self._parsed.pop(d["txId"], None) or Transaction.from_dict(d)
            txs.append(tx)
        block = make_block(self.store.height, self.store.head_hash, txs)
        self.store.append(block)
        self._encoded[block.number] = encode_block(block)
        self.blocks_cut += 1
        ev, self._block_added = self._block_added, asyncio.Event()
        ev.set()

    def block_bytes(self, n: int) -> bytes:
        data = self._encoded.get(n)
        if data is None:
            data = self._encoded[n] = encode_block(self.store[n])
        return data

    # -- transport for the replicated log -------------------------------------

    async def _client(self, name: str) -> wire.RpcClient:
        c = self._clients.get(name)
        if c is not None and not c.is_closed:
            return c
        lock = self._connecting.setdefault(name, asyncio.Lock())
        async with lock:
            c = self._clients.get(name)
            if c is not None and not c.is_closed:
                return c
            ep = self.members[name]
            c = await wire.RpcClient.open(ep.host, ep.port, self.identity, timeout=self.raft.timing.rpc_timeout)
            self._clients[name] = c
            return c

    async def _transport(self, peer: str, msg_type: str, payload: dict) -> dict:
        client = await self._client(peer)
        return await client.call(msg_type, payload, timeout=self.raft.timing.rpc_timeout)

    # -- lifecycle ---------------------------------------------------------------

    async def start(self) -> None:
        self._block_added = asyncio.Event()
        self.server = await wire.serve(self.cfg.host, self.cfg.port, self.identity, self.handle)
        self.watcher.start()
        self.raft.start()
        self._tick_task = asyncio.get_running_loop().create_task(self._ticker())
        log.info("%s listening on %s:%d (height %d)", self.cfg.name, self.cfg.host, self.cfg.port, self.store.height)

    async def stop(self) -> None:
        self.watcher.stop()
        if self._tick_task:
            self._tick_task.cancel()
        await self.raft.stop()
        if self.server:
            self.server.close()
        for c in self._clients.values():
            await c.close()

    async def _ticker(self) -> None:
        period = max(0.005, self.cfg.batch.batch_timeout / 10)
        loop = asyncio.get_running_loop()
        while True:
            await asyncio.sleep(period)
            if self.raft.is_leader:
                batch = self.cutter.on_timeout(loop.time())
                if batch:
                    self._propose(batch)

    def _propose(self, batch: list) -> None:
        ids = [tx_id for tx_id, _ in batch]
        self.pending_ids.difference_update(ids)
        try:
            self.raft.propose({"txs": [d for _, d in batch]})
        except NotLeader:
            log.info("%s: lost leadership before proposing %d envelopes", self.cfg.name, len(batch))

    # -- request handling ----------------------------------------------------------

    def _authenticate(self, msg: wire.Message, orderer_only: bool = False):
        caller = verify_certificate(self.directory, msg.sender, canonical.utcnow())
        if orderer_only and caller.org_id != ORDERER_ORG:
            raise ValidationError("only ordering nodes may send replication traffic")
        return caller

    async def handle(self, conn: wire.ServerConnection, msg: wire.Message):
        t = msg.type
        if t == "AppendEntries":
            check_issuer(self.directory, msg.sender)
            return self.raft.handle_append_entries(msg.payload)
        if t == "RequestVote":
            check_issuer(self.directory, msg.sender)
            return self.raft.handle_request_vote(msg.payload)
        caller = self._authenticate(msg)
        if t == "Broadcast":
            return self._broadcast(msg, caller)
        if t == "Deliver":
            return await self._deliver(conn, msg)
        if t == "Stats":
            return self.stats()
        if t == "Inspect":
            return self.inspect()
        raise ValidationError(f"orderer does not handle {t}")

    def _broadcast(self, msg: wire.Message, caller) -> dict:
        self.broadcasts += 1
        if caller.role is not Role.ADMIN:
            raise ValidationError("only gateway nodes may broadcast")
        if not self.raft.is_leader:
            raise NotLeader("not the leader", leader=self.raft.leader_id)
        d = msg.payload["tx"]
        tx = Transaction.from_dict(d)
        if tx.tx_id in self.log_ids or tx.tx_id in self.pending_ids:
            self.duplicates += 1
            return {"status": "duplicate"}
        encoded = tx.encoded
        if encoded != canonical.encode(d):
            d = canonical.decode(encoded)  # only canonical transactions enter the log
        batches = self.cutter.enqueue((tx.tx_id, d), len(encoded), asyncio.get_running_loop().time())
        self.pending_ids.add(tx.tx_id)
        self._parsed[tx.tx_id] = tx
        for batch in batches:
            self._propose(batch)
        return {"status": "accepted"}

    async def _deliver(self, conn: wire.ServerConnection, msg: wire.Message):
        start = int(msg.payload.get("start", 0))
        sub = msg.payload["id"]
        await conn.reply(msg, {"height": self.store.height})
        n = max(0, start)
        try:
            while True:
                while n < self.store.height:
                    body = self.block_bytes(n)
                    payload = b'{"block":' + body + b',"number":' + str(n).encode() + b',"sub":' + str(sub).encode() + b"}"
                    await conn.send_raw("Block", payload)
                    n += 1
                await self._block_added.wait()
        except StreamClosed:
            pass
        return wire.NO_REPLY

    def stats(self) -> dict:
        return {
            **resource_stats(),
            "name": self.cfg.name,
            "kind": "orderer",
            "height": self.store.height,
            "broadcasts": self.broadcasts,
            "duplicates": self.duplicates,
            "role": self.raft.state.value,
            "term": self.raft.term,
            "leader": self.raft.leader_id,
            "logLength": self.raft.last_index,
            "commitIndex": self.raft.commit_index,
            "diskWriteBytes": self.store.bytes_written + self.raft.storage.bytes_written,
        }

    def inspect(self) -> dict:
        return {
            "name": self.cfg.name,
            "height": self.store.height,
            "headHash": self.store.head_hash.hex(),
            "role": self.raft.state.value,
            "leader": self.raft.leader_id,
        }


async def run(cfg: NodeConfig) -> OrdererNode:
    node = OrdererNode(cfg)
    await node.start()
    return node
