"""Multi-process network: lifecycle, gateway flows, events, recovery and the CLI."""

import asyncio
import socket
import time

import pytest

from chainiot import canonical
from chainiot.bench import WorkloadSpec, run_workload
from chainiot.cli import main
from chainiot.client import GatewayClient
from chainiot.errors import (
    AccessDenied,
    AllPeersUnavailable,
    EndorsementFailure,
    NotFound,
    Revoked,
    ValidationError,
)
from chainiot.ledger import ValidationCode as VC
from chainiot.network import (
    NetworkError,
    _alive,
    _read_pids,
    issue,
    kill_node,
    network_up,
    node_call,
    restart_node,
    revoke,
    verify_ledgers,
)
from chainiot.ordering.cutter import BatchConfig
from chainiot.topology import TopologyConfig, default_topology

from conftest import free_port_block

pytestmark = pytest.mark.network


def arun(coro):
    return asyncio.run(coro)


async def client(info, org, subject, peer_index=0, **kw):
    _, ident = issue(info, org, subject, **kw)
    return await GatewayClient.connect(info.peers_of(org)[peer_index], ident)


async def inspect_all(info, replay=False):
    return {ep.name: await node_call(info, ep, "Inspect", {"replay": replay}, timeout=30) for ep in info.peers}


async def converge(info, timeout=20.0):
    """Heights and state hashes equal across peers."""
    end = time.monotonic() + timeout
    while True:
        got = await inspect_all(info)
        if len({(v["height"], v["headHash"], v["stateHash"]) for v in got.values()}) == 1:
            return got
        if time.monotonic() > end:
            raise AssertionError(f"peers did not converge: {got}")
        await asyncio.sleep(0.2)


# -- lifecycle ---------------------------------------------------------------------

def test_default_network_has_seven_processes(shared_network):
    info = shared_network.info
    pids = _read_pids(info.layout)
    assert len(pids) == 7 and all(_alive(p) for p in pids.values())

    async def stats():
        return [await node_call(info, ep, "Stats") for ep in info.peers + info.orderers]

    got = arun(stats())
    assert sorted(s["kind"] for s in got) == ["orderer"] * 3 + ["peer"] * 4
    assert sum(1 for s in got if s.get("role") == "leader") == 1


def test_fresh_network_verifies(shared_network):
    reports = verify_ledgers(shared_network.data_dir)
    assert len(reports) == 7 and all(r.ok for r in reports)


def test_solo_up_down(make_network):
    net = make_network(solo=True)
    pids = _read_pids(net.info.layout)
    assert len(pids) == 5
    assert len(net.down()) == 5
    assert not any(_alive(p) for p in pids.values())


def test_duplicate_port_rejected_before_spawn(tmp_path):
    d = default_topology(str(tmp_path / "n"), base_port=free_port_block()).to_dict()
    d["auxPort"] = d["orgs"][0]["gatewayPorts"][0]
    with pytest.raises(ValidationError):
        TopologyConfig.from_dict(d)
    assert not (tmp_path / "n").exists()


def test_busy_port_rejected_before_spawn(tmp_path):
    cfg = default_topology(str(tmp_path / "n"), base_port=free_port_block(), solo=True)
    with socket.socket() as s:
        s.bind(("127.0.0.1", cfg.ordering.ports[0]))
        s.listen()
        with pytest.raises(NetworkError):
            network_up(cfg)
    assert not (tmp_path / "n" / "pids.json").exists()


# -- gateway flows -----------------------------------------------------------------

def test_register_query_and_read_path(shared_network):
    info = shared_network.info

    async def run():
        dev = await client(info, "org1", "gw-dev")
        app = await client(info, "org2", "gw-app", peer_index=1)
        try:
            res = await dev.register_device("thermo", "lab")
            assert res.code is VC.VALID
            before = await inspect_all(info)
            calls = [(await node_call(info, ep, "Stats"))["orderingCalls"] for ep in info.peers]
            for _ in range(20):
                rec = await app.get_device("org1", dev.device_id)
            assert rec["name"] == "thermo"
            after = await inspect_all(info)
            assert {k: v["height"] for k, v in before.items()} == {k: v["height"] for k, v in after.items()}
            assert [(await node_call(info, ep, "Stats"))["orderingCalls"] for ep in info.peers] == calls
            with pytest.raises(ValidationError):
                await app.evaluate("device-registry/register", ["x"])
            with pytest.raises(NotFound):
                await app.get_device("org1", "0" * 64)
        finally:
            await dev.close()
            await app.close()

    arun(run())


def test_reader_cannot_submit(shared_network):
    async def run():
        r = await client(shared_network.info, "org1", "gw-reader", role="reader")
        try:
            with pytest.raises(AccessDenied):
                await r.register_device("x")
            assert isinstance(await r.get_all_devices("org1"), list)
        finally:
            await r.close()

    arun(run())


def test_concurrent_writes_same_key(shared_network):
    async def run():
        dev = await client(shared_network.info, "org1", "gw-mvcc")
        try:
            await dev.register_device("d")
            await dev.register_service("svc", 1)
            a, b = await asyncio.gather(dev.register_service("svc", 2), dev.register_service("svc", 3))
            assert sorted([a.code.value, b.code.value]) == ["MVCC_CONFLICT", "VALID"]
        finally:
            await dev.close()

    arun(run())


def test_revoked_cert_rejected_on_evaluate(shared_network):
    info = shared_network.info

    async def run():
        c = await client(info, "org1", "gw-revoked")
        try:
            await c.get_all_devices("org1")
            revoke(info, "org1", c.identity.certificate.serial)
            await asyncio.sleep(1.0)  # nodes poll the CRL
            with pytest.raises(Revoked):
                await c.get_all_devices("org1")
        finally:
            await c.close()

    arun(run())


def test_notifications_and_cursor(shared_network):
    info = shared_network.info

    async def run():
        dev = await client(info, "org1", "ev-dev")
        app = await client(info, "org2", "ev-app")
        other = await client(info, "org1", "ev-other")
        try:
            await dev.register_device("d")
            await dev.register_service("temp-read", 1)
            dev_events = await dev.subscribe_own()
            other_events = await other.subscribe_own()
            with pytest.raises(AccessDenied):
                await app.subscribe(device=("org1", dev.device_id))
            rid, res = await app.request_service("org1", dev.device_id, "temp-read", "read")
            ev = await dev_events.next(10)
            assert ev["txId"] == res.tx_id and ev["target"]["deviceId"] == dev.device_id
            rsp = await dev.respond(rid, 0, b"21.5C")
            assert rsp.code is VC.VALID
            with pytest.raises(Exception):
                await other_events.next(1.0)
            await dev_events.close()

            # a second request, then resume from the first notification's cursor
            rid2, res2 = await app.request_service("org1", dev.device_id, "temp-read", "read")
            resumed = await dev.subscribe_own(cursor=(ev["blockNumber"], ev["txIndex"]))
            got = await resumed.next(10)
            assert got["txId"] == res2.tx_id
            await resumed.close()
            await other_events.close()
        finally:
            for c in (dev, app, other):
                await c.close()

    arun(run())


# -- conservation and determinism --------------------------------------------------

def test_workloads_conserve_ops_and_replay(shared_network):
    info = shared_network.info

    async def run():
        tx = await run_workload(info, WorkloadSpec("service-broker/request", total_ops=300, fixed_load=50))
        rd = await run_workload(info, WorkloadSpec("device-registry/get", total_ops=2000, fixed_load=100))
        return tx, rd

    tx, rd = arun(run())
    for r, spec_total, fixed in ((tx, 300, 50), (rd, 2000, 100)):
        assert r.dispatched == spec_total == r.completed + r.failed
        assert r.max_in_flight <= fixed
    assert tx.n_tx == 300 and tx.failed == 0
    assert rd.extra["heightsBefore"] == rd.extra["heightsAfter"]
    for r in (tx, rd):
        assert set(r.extra["replayConsistent"]) == {ep.name for ep in info.peers}
        assert all(r.extra["replayConsistent"].values())
    assert rd.extra["orderingCalls"] == 0

    async def check():
        await converge(info)
        return await inspect_all(info, replay=True)

    got = arun(check())
    assert len({v["stateHash"] for v in got.values()}) == 1
    for v in got.values():
        assert v["replayStateHash"] == v["stateHash"] and v["codesMatch"]


# -- faults and recovery -----------------------------------------------------------

def test_peer_restart_catches_up_and_org_outage(make_network):
    # half the client org's peers must confirm, so submits complete with one peer down
    net = make_network(solo=True, batch=BatchConfig(batch_timeout=0.2), confirmation_threshold=0.5)
    info = net.info

    async def phase1():
        dev = await client(info, "org1", "rc-dev")
        try:
            await dev.register_device("d")
            kill_node(info, "peer1.org1")
            for v in range(1, 6):
                assert (await dev.register_service(f"s{v}", 1)).code is VC.VALID
        finally:
            await dev.close()

    arun(phase1())
    restart_node(info, "peer1.org1")
    got = arun(converge(info))
    assert len(got) == 4

    kill_node(info, "peer0.org2")
    kill_node(info, "peer1.org2")

    async def phase2():
        dev = await client(info, "org1", "rc-dev2")
        try:
            heights = {(await node_call(info, ep, "Stats"))["height"] for ep in info.peers_of("org1")}
            with pytest.raises((EndorsementFailure, AllPeersUnavailable)):
                await dev.register_device("x")
            after = {(await node_call(info, ep, "Stats"))["height"] for ep in info.peers_of("org1")}
            assert heights == after
        finally:
            await dev.close()

    arun(phase2())


def test_full_restart_recovers_state(make_network):
    net = make_network(solo=True, batch=BatchConfig(batch_timeout=0.2))
    info = net.info

    async def write():
        dev = await client(info, "org1", "persist")
        try:
            await dev.register_device("kept")
            return dev.device_id
        finally:
            await dev.close()

    device_id = arun(write())
    before = arun(converge(info))
    net.down()
    network_up(net.cfg, fresh=False)
    after = arun(converge(info))
    assert {k: v["stateHash"] for k, v in after.items()} == {k: v["stateHash"] for k, v in before.items()}

    async def read():
        c = await client(info, "org2", "reader-after")
        try:
            return await c.get_device("org1", device_id)
        finally:
            await c.close()

    assert arun(read())["name"] == "kept"


# -- CLI ---------------------------------------------------------------------------

def test_cli_against_running_network(shared_network, tmp_path, capsys):
    d = shared_network.data_dir
    assert main(["network", "status", "-d", d]) == 0
    assert "height=" in capsys.readouterr().out
    assert main(["ledger", "verify", "-d", d]) == 0
    assert main(["identity", "issue", "-d", d, "--org", "org2", "--subject", "cli-user"]) == 0
    assert main(["identity", "issue", "-d", d, "--org", "org2", "--subject", "cli-user"]) == 1
    assert main(["identity", "issue", "-d", d, "--org", "nope", "--subject", "x"]) in (1, 2)
    blob = tmp_path / "b.bin"
    blob.write_bytes(b"cli blob")
    capsys.readouterr()
    assert main(["aux", "put", "-d", d, str(blob)]) == 0
    uri = capsys.readouterr().out.strip()
    out = tmp_path / "back.bin"
    assert main(["aux", "get", "-d", d, uri, "--out", str(out)]) == 0
    assert out.read_bytes() == b"cli blob"
    assert main(["aux", "get", "-d", d, "aux://sha256/zz"]) == 1
    wl = tmp_path / "w.json"
    canonical.dump_file(wl, {"operation": "device-registry/get-all", "totalOps": 50, "fixedLoad": 10})
    assert main(["bench", "run", "-d", d, "--workload", str(wl), "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "summary.tsv").exists()
    assert main(["bench", "run", "-d", d, "--workload", str(blob), "--out", str(tmp_path / "o2")]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["ledger", "verify", "-d", str(tmp_path / "missing")]) == 1
