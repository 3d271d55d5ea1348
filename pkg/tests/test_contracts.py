import uuid

import pytest
from hypothesis import given, settings, strategies as st

from chainiot import canonical
from chainiot.contracts import ServiceRef, ServiceRequestRecord, ServiceResponseRecord, keys
from chainiot.errors import (
    AccessDenied,
    AlreadyResponded,
    DeviceNotRegistered,
    DuplicateRequestId,
    NotFound,
    RequestNotFound,
    ServiceNotFound,
    StaleVersion,
    ValidationError,
)
from chainiot.identity import Role, derive_device_id as did
from chainiot.ledger import ValidationCode as VC
from chainiot.localnet import LocalNetwork


class Net:
    """Thin synchronous helper over the in-process network."""

    def __init__(self):
        self.n = LocalNetwork(peers_per_org=1)

    def who(self, org="org1", subject="d", role=Role.WRITER):
        return self.n.issue(org, subject, role)

    def tx(self, ident, op, *args):
        tx_id, code = self.n.submit(ident, op, args)
        assert code is VC.VALID, code
        return tx_id

    def read(self, ident, op, *args):
        return canonical.decode(self.n.evaluate(ident, op, args))

    def simulate(self, ident, op, *args):
        return self.n.peers[ident.org_id][0].simulate(self.n.proposal(ident, op, args))

    def request(self, ident, target, service="temp-read", rid=None, method="read", args=()):
        rec = ServiceRequestRecord.new(ServiceRef(service, did(target.certificate), target.org_id), method, args,
                                       time=self.n.tick(), request_id=rid)
        self.tx(ident, "service-broker/request", canonical.encode(rec.to_dict()))
        return rec.id

    def respond(self, ident, rid, status=0, value=b"21.5C"):
        rec = ServiceResponseRecord(rid, self.n.tick(), status, value)
        return self.tx(ident, "service-broker/respond", canonical.encode(rec.to_dict()))


@pytest.fixture
def net():
    return Net()


@pytest.fixture
def device(net):
    d = net.who(subject="thermo")
    net.tx(d, "device-registry/register", "thermo", "hallway sensor")
    net.tx(d, "service-registry/register", "temp-read", "1", "celsius")
    return d


# -- devices ---------------------------------------------------------------------

def test_register_device_record(net):
    c = net.who()
    net.tx(c, "device-registry/register", "thermo", "hallway sensor")
    rec = net.read(c, "device-registry/get", "org1", did(c.certificate))
    assert rec["deviceId"] == did(c.certificate) and rec["organizationId"] == "org1"
    assert (rec["name"], rec["description"]) == ("thermo", "hallway sensor")


def test_reader_cannot_register(net):
    r = net.who(role=Role.READER)
    with pytest.raises(AccessDenied):
        net.simulate(r, "device-registry/register", "x")
    with pytest.raises(AccessDenied):
        net.n.endorse(r, "device-registry/register", ["x"])


def test_reregister_upserts(net):
    c = net.who()
    net.tx(c, "device-registry/register", "thermo", "old")
    first = net.read(c, "device-registry/get", "org1", did(c.certificate))
    net.tx(c, "device-registry/register", "thermo", "new")
    second = net.read(c, "device-registry/get", "org1", did(c.certificate))
    assert len(net.read(c, "device-registry/get-all", "org1")) == 1
    assert second["description"] == "new" and second["lastUpdateTime"] > first["lastUpdateTime"]


def test_deregister_cascades(net, device):
    org, dev = "org1", did(device.certificate)
    net.tx(device, "service-registry/register", "humidity", "1")
    net.tx(device, "device-registry/deregister")
    with pytest.raises(NotFound):
        net.read(device, "device-registry/get", org, dev)
    with pytest.raises(NotFound):
        net.read(device, "service-registry/get", org, dev, "temp-read")
    assert net.read(device, "service-registry/get-all", org) == []


def test_deregister_errors(net, device):
    other = net.who(subject="other")
    with pytest.raises(AccessDenied):
        net.simulate(other, "device-registry/deregister", "org1", did(device.certificate))
    with pytest.raises(NotFound):
        net.simulate(other, "device-registry/deregister")


def test_get_all_devices_sorted_and_reader_may_query(net):
    a, b = net.who(subject="a"), net.who(subject="b")
    for x in (a, b):
        net.tx(x, "device-registry/register", "n")
    reader = net.who(org="org2", role=Role.READER)
    got = net.read(reader, "device-registry/get-all", "org1")
    assert [r["deviceId"] for r in got] == sorted([did(a.certificate), did(b.certificate)])
    with pytest.raises(NotFound):
        net.read(reader, "device-registry/get", "org1", "0" * 64)


# -- services --------------------------------------------------------------------

def test_service_versions(net, device):
    net.tx(device, "service-registry/register", "temp-read", "2")
    rec = net.read(device, "service-registry/get", "org1", did(device.certificate), "temp-read")
    assert rec["version"] == 2 and rec["lastUpdateTime"]
    with pytest.raises(StaleVersion):
        net.simulate(device, "service-registry/register", "temp-read", "1")
    with pytest.raises(ValidationError):
        net.simulate(device, "service-registry/register", "temp-read", "zero")


def test_service_before_device(net):
    c = net.who()
    with pytest.raises(DeviceNotRegistered):
        net.simulate(c, "service-registry/register", "temp-read", "1")


def test_deregister_service(net, device):
    net.tx(device, "service-registry/deregister", "temp-read")
    with pytest.raises(NotFound):
        net.read(device, "service-registry/get", "org1", did(device.certificate), "temp-read")
    with pytest.raises(NotFound):
        net.simulate(device, "service-registry/deregister", "temp-read")


def test_get_all_services_sorted(net):
    a, b = net.who(subject="a"), net.who(subject="b")
    for x, names in ((a, ["z", "m"]), (b, ["q"])):
        net.tx(x, "device-registry/register", "n")
        for name in names:
            net.tx(x, "service-registry/register", name, "1")
    got = net.read(a, "service-registry/get-all", "org1")
    assert len(got) == 3
    assert [(r["deviceId"], r["name"]) for r in got] == sorted((r["deviceId"], r["name"]) for r in got)


def test_slash_forbidden_in_segments(net, device):
    with pytest.raises(ValidationError):
        net.simulate(device, "service-registry/register", "a/b", "1")


# -- broker ----------------------------------------------------------------------

def test_request_flow(net, device):
    app = net.who(org="org2", subject="app")
    rid = net.request(app, device)
    got = net.read(app, "service-broker/get", rid)
    assert got["id"] == rid and got["method"] == "read" and got["requester"] == did(app.certificate)
    pending = net.read(device, "service-broker/get-all", "org1", did(device.certificate))
    assert [r["id"] for r in pending] == [rid]
    with pytest.raises(NotFound):
        net.read(app, "service-broker/get-response", rid)

    net.respond(device, rid)
    rsp = net.read(app, "service-broker/get-response", rid)
    assert rsp["statusCode"] == 0 and canonical.b64d(rsp["returnValue"]) == b"21.5C"
    assert net.read(device, "service-broker/get-all", "org1", did(device.certificate)) == []


def test_duplicate_request_and_missing_service(net, device):
    app = net.who(org="org2", subject="app")
    rid = net.request(app, device)
    with pytest.raises(DuplicateRequestId):
        net.request(app, device, rid=rid)
    with pytest.raises(ServiceNotFound):
        net.request(app, device, service="nope")
    with pytest.raises(ValidationError):
        net.request(app, device, rid="not-a-uuid")


def test_respond_rules(net, device):
    app = net.who(org="org2", subject="app")
    rid = net.request(app, device)
    with pytest.raises(AccessDenied):
        net.respond(app, rid)
    net.respond(device, rid)
    with pytest.raises(AlreadyResponded):
        net.respond(device, rid)
    with pytest.raises(RequestNotFound):
        net.respond(device, str(uuid.uuid4()))


def test_pending_sorted_by_time_then_id(net, device):
    app = net.who(org="org2", subject="app")
    ids = [net.request(app, device) for _ in range(4)]
    got = net.read(device, "service-broker/get-all", "org1", did(device.certificate))
    assert [r["id"] for r in got] == ids


def test_remove_request(net, device):
    app = net.who(org="org2", subject="app")
    stranger = net.who(subject="stranger")
    rid = net.request(app, device)
    net.respond(device, rid)
    with pytest.raises(AccessDenied):
        net.simulate(stranger, "service-broker/remove", rid)
    net.tx(app, "service-broker/remove", rid)
    with pytest.raises(NotFound):
        net.read(app, "service-broker/get", rid)
    with pytest.raises(NotFound):
        net.read(app, "service-broker/get-response", rid)
    with pytest.raises(NotFound):
        net.simulate(app, "service-broker/remove", rid)
    # history survives in the chain
    peer = net.n.all_peers[0]
    ops = [tx.contract_op for b in peer.store for tx in b.transactions]
    assert "service-broker/request" in ops and "service-broker/remove" in ops
    # target device may remove too
    rid2 = net.request(app, device)
    net.tx(device, "service-broker/remove", rid2)


def test_reads_are_canonical_and_repeatable(net, device):
    for op, args in [("device-registry/get-all", ("org1",)), ("service-registry/get-all", ("org1",))]:
        a = net.n.evaluate(device, op, args)
        assert a == net.n.evaluate(device, op, args) and canonical.is_canonical(a)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.sampled_from(["req", "rsp", "rm"]), min_size=1, max_size=15))
def test_every_response_has_its_request(ops):
    net = Net()
    dev = net.who(subject="dev")
    app = net.who(org="org2", subject="app")
    net.tx(dev, "device-registry/register", "n")
    net.tx(dev, "service-registry/register", "temp-read", "1")
    open_ids, all_ids = [], []
    for op in ops:
        if op == "req":
            rid = net.request(app, dev)
            open_ids.append(rid)
            all_ids.append(rid)
        elif op == "rsp" and open_ids:
            net.respond(dev, open_ids.pop(0))
        elif op == "rm" and all_ids:
            rid = all_ids.pop()
            if rid in open_ids:
                open_ids.remove(rid)
            net.tx(app, "service-broker/remove", rid)
    state = net.n.all_peers[0].state
    for key in state.keys_with_prefix("rsp/"):
        assert keys.request_key(key[4:]) in state
