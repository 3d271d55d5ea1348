import asyncio

import pytest

from chainiot import canonical
from chainiot.contracts import ServiceRef, ServiceRequestRecord
from chainiot.errors import SubscriberOverflow, ValidationError
from chainiot.gateway.events import EventFilter, EventHub, commit_events
from chainiot.identity import derive_device_id as did
from chainiot.ledger import ValidationCode as VC
from chainiot.localnet import LocalNetwork


class Sink:
    def __init__(self, delay=0.0):
        self.events, self.error, self.delay = [], None, delay

    async def send(self, ev):
        if self.delay:
            await asyncio.sleep(self.delay)
        self.events.append(ev)

    async def fail(self, err):
        self.error = err


def setup():
    net = LocalNetwork(peers_per_org=1)
    peer = net.all_peers[0]
    hub = EventHub(peer.store, max_queue=50)
    peer.listeners.append(hub.publish)
    dev = net.issue("org1", "dev")
    app = net.issue("org2", "app")
    net.submit(dev, "device-registry/register", ["t"])
    net.submit(dev, "service-registry/register", ["temp-read", "1"])
    return net, hub, dev, app


def request(net, app, dev, rid=None):
    rec = ServiceRequestRecord.new(ServiceRef("temp-read", did(dev.certificate), "org1"), "read",
                                   time=net.tick(), request_id=rid)
    return rec.id, net.endorse(app, "service-broker/request", [canonical.encode(rec.to_dict())])


async def settle():
    for _ in range(20):
        await asyncio.sleep(0)


def test_device_and_requester_notifications():
    async def run():
        net, hub, dev, app = setup()
        dev_sink, app_sink, other = Sink(), Sink(), Sink()
        hub.subscribe(dev_sink.send, dev_sink.fail, EventFilter(org_id="org1", device_id=did(dev.certificate)))
        hub.subscribe(app_sink.send, app_sink.fail, EventFilter(requester_id=did(app.certificate)))
        hub.subscribe(other.send, other.fail, EventFilter(org_id="org1", device_id="f" * 64))
        rid, tx = request(net, app, dev)
        assert net.order([tx]) == [VC.VALID]
        await settle()
        assert [e["txId"] for e in dev_sink.events] == [tx.tx_id]
        assert app_sink.events == [] and other.events == []
        from chainiot.contracts import ServiceResponseRecord
        rsp = ServiceResponseRecord(rid, net.tick(), 0, b"21.5C")
        net.submit(dev, "service-broker/respond", [canonical.encode(rsp.to_dict())])
        await settle()
        assert [e["contractOp"] for e in app_sink.events] == ["service-broker/respond"]
        assert other.events == []

    asyncio.run(run())


def test_invalid_request_does_not_notify():
    async def run():
        net, hub, dev, app = setup()
        sink = Sink()
        hub.subscribe(sink.send, sink.fail, EventFilter(org_id="org1", device_id=did(dev.certificate)))
        rid, tx = request(net, app, dev)
        _, dup = request(net, app, dev, rid=rid)  # same id endorsed before the first commits
        assert net.order([tx, dup]) == [VC.VALID, VC.MVCC_CONFLICT]
        await settle()
        assert [e["txId"] for e in sink.events] == [tx.tx_id]

    asyncio.run(run())


def test_cursor_replay_has_no_gaps():
    async def run():
        net, hub, dev, app = setup()
        for _ in range(4):
            net.order([request(net, app, dev)[1]])
        everything = [ev for b in net.all_peers[0].store for ev in commit_events(b)]
        cut = everything[3]
        sink = Sink()
        hub.subscribe(sink.send, sink.fail, EventFilter(all=True), cursor=(cut["blockNumber"], cut["txIndex"]))
        net.order([request(net, app, dev)[1]])
        await settle()
        got = [(e["blockNumber"], e["txIndex"]) for e in sink.events]
        later = [(e["blockNumber"], e["txIndex"]) for e in everything[4:]]
        assert got[: len(later)] == later and len(got) == len(later) + 1
        assert got == sorted(got)

    asyncio.run(run())


def test_slow_subscriber_overflows():
    async def run():
        net, hub, dev, app = setup()
        slow = Sink(delay=0.01)
        hub.subscribe(slow.send, slow.fail, EventFilter(all=True))
        for _ in range(60):
            net.order([request(net, app, dev)[1]])
        for _ in range(300):
            if slow.error is not None:
                break
            await asyncio.sleep(0.02)
        assert isinstance(slow.error, SubscriberOverflow)
        assert not hub.subscribers
        # what was delivered before the cut-off is a gap-free prefix, so a cursor resume is lossless
        got = [e["blockNumber"] for e in slow.events]
        assert len(got) == 50 and got == list(range(got[0], got[0] + 50))

    asyncio.run(run())


def test_filter_validation_round_trip():
    with pytest.raises(ValidationError):
        EventFilter()
    with pytest.raises(ValidationError):
        EventFilter(org_id="org1")
    f = EventFilter(org_id="org1", device_id="d", requester_id="r")
    assert EventFilter.from_dict(f.to_dict()) == f
