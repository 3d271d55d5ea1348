"""Leader-based replicated log: randomized-timeout elections and majority-ack replication.

The node is transport-agnostic: ``transport(peer_id, msg_type, payload)``
is an awaitable returning the peer's reply dict.  Term, vote and log are
persisted before any reply that depends on them.  Membership is static.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import os
import random
import struct
from dataclasses import dataclass
from typing import Any, Awaitable, Callable, NamedTuple, Optional, Sequence

from .. import canonical
from ..errors import NotLeader, PlatformError, StreamClosed, Timeout

log = logging.getLogger(__name__)

_LEN = struct.Struct(">I")


class Entry(NamedTuple):
    term: int
    data: Optional[dict]  # None marks a leader's no-op


class State(enum.Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


class RaftStorage:
    """Term/vote in a small JSON file; entries as length-prefixed canonical records."""

    def __init__(self, directory: str | os.PathLike | None):
        self.directory = directory
        self.bytes_written = 0
        if directory is not None:
            os.makedirs(directory, exist_ok=True)
            self.meta_path = os.path.join(directory, "raft-meta.json")
            self.log_path = os.path.join(directory, "raft-log.bin")

    def load(self) -> tuple[int, Optional[str], list[Entry]]:
        if self.directory is None:
            return 0, None, []
        term, voted = 0, None
        if os.path.exists(self.meta_path):
            meta = canonical.load_file(self.meta_path)
            term, voted = int(meta["term"]), meta.get("votedFor")
        entries: list[Entry] = []
        if os.path.exists(self.log_path):
            with open(self.log_path, "rb") as fh:
                data = fh.read()
            pos = 0
            while pos + 4 <= len(data):
                (n,) = _LEN.unpack_from(data, pos)
                if pos + 4 + n > len(data):
                    break  # torn tail from a crash mid-write
                rec = canonical.decode(data[pos + 4 : pos + 4 + n])
                entries.append(Entry(int(rec["term"]), rec["data"]))
                pos += 4 + n
            if pos != len(data):
                self._rewrite(entries)
        return term, voted, entries

    def save_meta(self, term: int, voted_for: Optional[str]) -> None:
        if self.directory is not None:
            canonical.dump_file(self.meta_path, {"term": term, "votedFor": voted_for})

    @staticmethod
    def _frame(entry: Entry) -> bytes:
        body = canonical.encode({"term": entry.term, "data": entry.data})
        return _LEN.pack(len(body)) + body

    def append(self, entries: Sequence[Entry]) -> None:
        if self.directory is None or not entries:
            return
        blob = b"".join(self._frame(e) for e in entries)
        with open(self.log_path, "ab") as fh:
            fh.write(blob)
        self.bytes_written += len(blob)

    def _rewrite(self, entries: Sequence[Entry]) -> None:
        tmp = self.log_path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(b"".join(self._frame(e) for e in entries))
        os.replace(tmp, self.log_path)

    def truncate(self, entries: Sequence[Entry]) -> None:
        if self.directory is not None:
            self._rewrite(entries)


Transport = Callable[[str, str, dict], Awaitable[dict]]


@dataclass
class RaftTiming:
    election_timeout: tuple[float, float] = (1.0, 2.0)
    heartbeat: float = 0.15
    rpc_timeout: float = 1.0
    max_batch_entries: int = 16


class RaftNode:
    def __init__(
        self,
        node_id: str,
        peers: Sequence[str],
        storage: RaftStorage,
        transport: Transport,
        apply: Callable[[int, Entry], None],
        timing: RaftTiming | None = None,
        applied_index: int = 0,
        on_append: Callable[[Sequence[Entry]], None] | None = None,
        on_truncate: Callable[[], None] | None = None,
        on_role_change: Callable[[State], None] | None = None,
    ):
        self.id = node_id
        self.peers = [p for p in peers if p != node_id]
        self.storage = storage
        self.transport = transport
        self.apply_fn = apply
        self.timing = timing or RaftTiming()
        self.on_append = on_append
        self.on_truncate = on_truncate
        self.on_role_change = on_role_change

        self.term, self.voted_for, entries = storage.load()
        self.log: list[Entry] = [Entry(0, None)] + entries  # index 0 is a sentinel
        self.commit_index = min(applied_index, self.last_index)
        self.last_applied = self.commit_index
        self.state = State.FOLLOWER
        self.leader_id: Optional[str] = None
        self.next_index: dict[str, int] = {}
        self.match_index: dict[str, int] = {}
        self._last_ack: dict[str, float] = {}
        self._wake: dict[str, asyncio.Event] = {}
        self._tasks: list[asyncio.Task] = []
        self._replicators: list[asyncio.Task] = []
        self._deadline = 0.0
        self._stopped = False
        self.elections = 0
        if on_append and entries:
            on_append(entries)

    # -- helpers ---------------------------------------------------------------

    @property
    def cluster_size(self) -> int:
        return len(self.peers) + 1

    @property
    def majority(self) -> int:
        return self.cluster_size // 2 + 1

    @property
    def last_index(self) -> int:
        return len(self.log) - 1

    @property
    def last_term(self) -> int:
        return self.log[-1].term

    @property
    def is_leader(self) -> bool:
        return self.state is State.LEADER

    def _now(self) -> float:
        return asyncio.get_running_loop().time()

    def _reset_deadline(self) -> None:
        lo, hi = self.timing.election_timeout
        self._deadline = self._now() + random.uniform(lo, hi)

    def _set_state(self, state: State) -> None:
        if state is not self.state:
            log.info("%s: %s -> %s (term %d)", self.id, self.state.value, state.value, self.term)
            self.state = state
            if self.on_role_change:
                self.on_role_change(state)

    def _persist_term(self, term: int, voted_for: Optional[str]) -> None:
        self.term, self.voted_for = term, voted_for
        self.storage.save_meta(term, voted_for)

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        self._reset_deadline()
        loop = asyncio.get_running_loop()
        self._tasks.append(loop.create_task(self._ticker()))

    async def stop(self) -> None:
        self._stopped = True
        for t in self._tasks + self._replicators:
            t.cancel()
        for t in self._tasks + self._replicators:
            try:
                await t
            except (asyncio.CancelledError, Exception):  # noqa: BLE001
                pass

    async def _ticker(self) -> None:
        while not self._stopped:
            await asyncio.sleep(min(0.05, self.timing.heartbeat / 2))
            now = self._now()
            if self.state is State.LEADER:
                if self.peers and not self._has_quorum_contact(now):
                    log.warning("%s: lost contact with a majority, stepping down", self.id)
                    self._become_follower(self.term, None)
            elif now >= self._deadline:
                await self._run_election()

    def _has_quorum_contact(self, now: float) -> bool:
        window = self.timing.election_timeout[1]
        alive = 1 + sum(1 for p in self.peers if now - self._last_ack.get(p, 0.0) <= window)
        return alive >= self.majority

    # -- elections -------------------------------------------------------------

    async def _run_election(self) -> None:
        self.elections += 1
        self._set_state(State.CANDIDATE)
        self._persist_term(self.term + 1, self.id)
        term = self.term
        self.leader_id = None
        self._reset_deadline()
        votes = 1
        if votes >= self.majority:
            self._become_leader()
            return
        req = {"term": term, "candidateId": self.id, "lastLogIndex": self.last_index, "lastLogTerm": self.last_term}

        async def ask(peer: str):
            try:
                return await asyncio.wait_for(self.transport(peer, "RequestVote", req), self.timing.rpc_timeout)
            except (PlatformError, asyncio.TimeoutError, OSError):
                return None

        for coro in asyncio.as_completed([ask(p) for p in self.peers]):
            reply = await coro
            if reply is None or self.state is not State.CANDIDATE or self.term != term:
                continue
            if reply["term"] > self.term:
                self._become_follower(reply["term"], None)
                return
            if reply.get("voteGranted"):
                votes += 1
                if votes >= self.majority:
                    self._become_leader()
                    return

    def handle_request_vote(self, req: dict) -> dict:
        term = int(req["term"])
        if term > self.term:
            self._become_follower(term, None)
        granted = False
        if term == self.term and self.voted_for in (None, req["candidateId"]):
            up_to_date = (req["lastLogTerm"], req["lastLogIndex"]) >= (self.last_term, self.last_index)
            if up_to_date:
                granted = True
                self._persist_term(self.term, req["candidateId"])
                self._reset_deadline()
        return {"term": self.term, "voteGranted": granted}

    def _become_follower(self, term: int, leader: Optional[str]) -> None:
        if term > self.term:
            self._persist_term(term, None)
        for t in self._replicators:
            t.cancel()
        self._replicators = []
        self.leader_id = leader
        self._set_state(State.FOLLOWER)
        self._reset_deadline()

    def _become_leader(self) -> None:
        self._set_state(State.LEADER)
        self.leader_id = self.id
        now = self._now()
        for p in self.peers:
            self.next_index[p] = self.last_index + 1
            self.match_index[p] = 0
            self._last_ack[p] = now
            self._wake[p] = asyncio.Event()
        self._append_local([Entry(self.term, None)])
        loop = asyncio.get_running_loop()
        self._replicators = [loop.create_task(self._replicate(p, self.term)) for p in self.peers]
        self._advance_commit()

    # -- log replication ---------------------------------------------------------

    def _append_local(self, entries: Sequence[Entry]) -> None:
        self.storage.append(entries)
        self.log.extend(entries)
        if self.on_append:
            self.on_append(entries)

    def propose(self, data: dict) -> int:
        if self.state is not State.LEADER:
            raise NotLeader("not the leader", leader=self.leader_id)
        self._append_local([Entry(self.term, data)])
        for ev in self._wake.values():
            ev.set()
        self._advance_commit()
        return self.last_index

    async def _replicate(self, peer: str, term: int) -> None:
        t = self.timing
        while self.state is State.LEADER and self.term == term and not self._stopped:
            ni = self.next_index[peer]
            prev = ni - 1
            entries = self.log[ni : ni + t.max_batch_entries]
            req = {
                "term": term,
                "leaderId": self.id,
                "prevLogIndex": prev,
                "prevLogTerm": self.log[prev].term,
                "entries": [{"term": e.term, "data": e.data} for e in entries],
                "leaderCommit": self.commit_index,
            }
            try:
                reply = await asyncio.wait_for(self.transport(peer, "AppendEntries", req), t.rpc_timeout)
            except (PlatformError, asyncio.TimeoutError, OSError):
                await asyncio.sleep(t.heartbeat)
                continue
            if self.state is not State.LEADER or self.term != term:
                return
            if reply["term"] > self.term:
                self._become_follower(reply["term"], None)
                return
            self._last_ack[peer] = self._now()
            if reply.get("success"):
                self.match_index[peer] = max(self.match_index[peer], prev + len(entries))
                self.next_index[peer] = self.match_index[peer] + 1
                self._advance_commit()
                if self.next_index[peer] <= self.last_index:
                    continue
            else:
                hint = int(reply.get("conflictIndex", prev))
                self.next_index[peer] = max(1, min(prev, hint))
                continue
            ev = self._wake[peer]
            ev.clear()
            try:
                await asyncio.wait_for(ev.wait(), t.heartbeat)
            except asyncio.TimeoutError:
                pass

    def handle_append_entries(self, req: dict) -> dict:
        term = int(req["term"])
        if term < self.term:
            return {"term": self.term, "success": False}
        if term > self.term or self.state is not State.FOLLOWER:
            self._become_follower(term, req["leaderId"])
        self.leader_id = req["leaderId"]
        self._reset_deadline()
        prev = int(req["prevLogIndex"])
        if prev > self.last_index:
            return {"term": self.term, "success": False, "conflictIndex": self.last_index + 1}
        if self.log[prev].term != int(req["prevLogTerm"]):
            bad_term = self.log[prev].term
            first = prev
            while first > 1 and self.log[first - 1].term == bad_term:
                first -= 1
            return {"term": self.term, "success": False, "conflictIndex": first}
        incoming = [Entry(int(e["term"]), e["data"]) for e in req["entries"]]
        index = prev + 1
        new: list[Entry] = []
        for i, entry in enumerate(incoming):
            at = index + i
            if at <= self.last_index:
                if self.log[at].term != entry.term:
                    if at <= self.commit_index:
                        raise AssertionError("leader tried to overwrite a committed entry")
                    del self.log[at:]
                    self.storage.truncate(self.log[1:])
                    if self.on_truncate:
                        self.on_truncate()
                    new = incoming[i:]
                    break
            else:
                new = incoming[i:]
                break
        if new:
            self._append_local(new)
        last_new = prev + len(incoming)
        leader_commit = int(req["leaderCommit"])
        if leader_commit > self.commit_index:
            self.commit_index = min(leader_commit, last_new)
            self._apply_committed()
        return {"term": self.term, "success": True}

    def _advance_commit(self) -> None:
        if self.state is not State.LEADER:
            return
        matches = sorted([self.last_index] + [self.match_index[p] for p in self.peers], reverse=True)
        candidate = matches[self.majority - 1]
        if candidate > self.commit_index and self.log[candidate].term == self.term:
            self.commit_index = candidate
            self._apply_committed()

    def _apply_committed(self) -> None:
        while self.last_applied < self.commit_index:
            self.last_applied += 1
            self.apply_fn(self.last_applied, self.log[self.last_applied])
