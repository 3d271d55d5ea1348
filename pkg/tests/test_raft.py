import asyncio
import os

import pytest

from chainiot.errors import NotLeader, StreamClosed
from chainiot.ordering.raft import Entry, RaftNode, RaftStorage, RaftTiming, State

FAST = RaftTiming(election_timeout=(0.15, 0.3), heartbeat=0.03, rpc_timeout=0.1)


class Cluster:
    def __init__(self, n=3, storage_dir=None):
        self.ids = [f"o{i}" for i in range(n)]
        self.down: set[str] = set()
        self.applied = {i: [] for i in self.ids}
        self.leaders_by_term: dict[int, set[str]] = {}
        self.nodes = {i: self._make(i, storage_dir) for i in self.ids}

    def _make(self, node_id, storage_dir=None):
        store = RaftStorage(None if storage_dir is None else os.path.join(storage_dir, node_id))

        def on_role(state, node_id=node_id):
            if state is State.LEADER:
                self.leaders_by_term.setdefault(self.nodes[node_id].term, set()).add(node_id)

        return RaftNode(node_id, self.ids, store, self._transport(node_id),
                        lambda idx, e, node_id=node_id: self.applied[node_id].append((idx, e.data)),
                        timing=FAST, on_role_change=on_role)

    def _transport(self, src):
        async def send(dst, kind, payload):
            if src in self.down or dst in self.down:
                raise StreamClosed("partitioned")
            await asyncio.sleep(0.001)
            node = self.nodes[dst]
            return node.handle_request_vote(payload) if kind == "RequestVote" else node.handle_append_entries(payload)
        return send

    def start(self):
        for n in self.nodes.values():
            n.start()

    async def stop(self):
        await asyncio.gather(*(n.stop() for n in self.nodes.values()))

    async def leader(self, timeout=5.0, exclude=()):
        loop = asyncio.get_running_loop()
        end = loop.time() + timeout
        while loop.time() < end:
            live = [n for i, n in self.nodes.items() if n.is_leader and i not in self.down and i not in exclude]
            if live:
                return live[0]
            await asyncio.sleep(0.02)
        raise AssertionError("no leader elected")

    def payloads(self, node_id):
        return [d for _, d in self.applied[node_id] if d is not None]


async def settle(cluster, pred, timeout=5.0):
    loop = asyncio.get_running_loop()
    end = loop.time() + timeout
    while loop.time() < end:
        if pred():
            return
        await asyncio.sleep(0.02)
    raise AssertionError("condition not reached")


def test_elect_and_replicate():
    async def run():
        c = Cluster()
        c.start()
        try:
            leader = await c.leader()
            for k in range(30):
                leader.propose({"k": k})
            want = [{"k": k} for k in range(30)]
            await settle(c, lambda: all(c.payloads(i) == want for i in c.ids))
            follower = next(n for n in c.nodes.values() if not n.is_leader)
            with pytest.raises(NotLeader) as exc:
                follower.propose({"k": -1})
            assert exc.value.leader == leader.id
        finally:
            await c.stop()
        assert all(len(ls) == 1 for ls in c.leaders_by_term.values())

    asyncio.run(run())


def test_leader_failover_keeps_committed_prefix():
    async def run():
        c = Cluster()
        c.start()
        try:
            old = await c.leader()
            for k in range(10):
                old.propose({"k": k})
            await settle(c, lambda: all(len(c.payloads(i)) == 10 for i in c.ids))
            c.down.add(old.id)
            new = await c.leader(exclude={old.id})
            assert new.term > old.term or new.id != old.id
            for k in range(10, 20):
                new.propose({"k": k})
            live = [i for i in c.ids if i != old.id]
            want = [{"k": k} for k in range(20)]
            await settle(c, lambda: all(c.payloads(i) == want for i in live))
            # the old leader steps down once it loses quorum contact, then catches up on rejoin
            await settle(c, lambda: not old.is_leader)
            c.down.clear()
            await settle(c, lambda: c.payloads(old.id) == want)
        finally:
            await c.stop()
        for i in c.ids:
            idx = [x for x, _ in c.applied[i]]
            assert idx == list(range(1, len(idx) + 1))
        assert all(len(ls) == 1 for ls in c.leaders_by_term.values())

    asyncio.run(run())


def test_minority_cannot_commit():
    async def run():
        c = Cluster()
        c.start()
        try:
            leader = await c.leader()
            others = [i for i in c.ids if i != leader.id]
            c.down.update(others)
            before = leader.commit_index
            leader.propose({"k": "lost"})
            await asyncio.sleep(0.3)
            assert leader.commit_index == before
        finally:
            await c.stop()

    asyncio.run(run())


def test_storage_round_trip_and_torn_tail(tmp_path):
    s = RaftStorage(tmp_path)
    s.save_meta(3, "o1")
    s.append([Entry(1, None), Entry(2, {"a": 1}), Entry(3, {"b": [1, 2]})])
    assert s.load() == (3, "o1", [Entry(1, None), Entry(2, {"a": 1}), Entry(3, {"b": [1, 2]})])
    with open(s.log_path, "ab") as fh:
        fh.write(b"\x00\x00\x01\x00{\"te")
    s2 = RaftStorage(tmp_path)
    assert s2.load()[2] == [Entry(1, None), Entry(2, {"a": 1}), Entry(3, {"b": [1, 2]})]
    assert os.path.getsize(s2.log_path) == s.bytes_written
    s2.truncate([Entry(1, None)])
    assert RaftStorage(tmp_path).load()[2] == [Entry(1, None)]


def test_restart_from_disk(tmp_path):
    async def run():
        c = Cluster(storage_dir=str(tmp_path))
        c.start()
        leader = await c.leader()
        for k in range(5):
            leader.propose({"k": k})
        await settle(c, lambda: all(len(c.payloads(i)) == 5 for i in c.ids))
        await c.stop()

        c2 = Cluster(storage_dir=str(tmp_path))
        for i in c2.ids:
            assert [e.data for e in c2.nodes[i].log[1:] if e.data is not None] == [{"k": k} for k in range(5)]
        c2.start()
        try:
            leader = await c2.leader()
            leader.propose({"k": 5})
            await settle(c2, lambda: all(c2.payloads(i)[-1:] == [{"k": 5}] for i in c2.ids))
            # replay from index 1 re-applies the whole log in order
            assert all(c2.payloads(i) == [{"k": k} for k in range(6)] for i in c2.ids)
        finally:
            await c2.stop()

    asyncio.run(run())


def test_vote_rules():
    async def run():
        c = Cluster()
        n = c.nodes["o0"]
        n._reset_deadline()
        n.log.append(Entry(2, {"x": 1}))
        assert not n.handle_request_vote({"term": 3, "candidateId": "o1", "lastLogIndex": 5, "lastLogTerm": 1})["voteGranted"]
        assert n.term == 3
        assert n.handle_request_vote({"term": 3, "candidateId": "o2", "lastLogIndex": 1, "lastLogTerm": 2})["voteGranted"]
        assert not n.handle_request_vote({"term": 3, "candidateId": "o1", "lastLogIndex": 9, "lastLogTerm": 2})["voteGranted"]
        assert n.handle_append_entries({"term": 2, "leaderId": "o1", "prevLogIndex": 0, "prevLogTerm": 0,
                                        "entries": [], "leaderCommit": 0}) == {"term": 3, "success": False}

    asyncio.run(run())
