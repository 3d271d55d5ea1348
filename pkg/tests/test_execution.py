from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from chainiot import canonical
from chainiot.errors import InvalidProposal, Revoked, UnknownOperation, ValidationError
from chainiot.execution import EndorsementPolicy, TxSimulator, assemble_transaction, create_proposal
from chainiot.identity import Role, derive_device_id
from chainiot.ledger import Endorsement, ValidationCode as VC, Version, WorldState
from chainiot.localnet import LocalNetwork


def reg(net, who, name="dev"):
    return net.endorse(who, "device-registry/register", [name])


def test_valid_commit_everywhere(localnet):
    d = localnet.issue("org1", "d")
    tx_id, code = localnet.submit(d, "device-registry/register", ["thermo", "x"])
    assert code is VC.VALID
    key = f"dev/org1/{derive_device_id(d.certificate)}"
    hashes = {p.state.content_hash() for p in localnet.all_peers}
    assert len(hashes) == 1 and key in localnet.all_peers[0].state
    assert {p.store.head_hash for p in localnet.all_peers} == {localnet.all_peers[0].store.head_hash}


def test_mvcc_conflict_in_block(localnet):
    d = localnet.issue("org1", "d")
    localnet.submit(d, "device-registry/register", ["a"])
    localnet.submit(d, "service-registry/register", ["s", "1"])
    t1 = localnet.endorse(d, "service-registry/register", ["s", "2"])
    t2 = localnet.endorse(d, "service-registry/register", ["s", "3"])
    assert localnet.order([t1, t2]) == [VC.VALID, VC.MVCC_CONFLICT]
    raw = localnet.evaluate(d, "service-registry/get", ["org1", derive_device_id(d.certificate), "s"])
    assert canonical.decode(raw)["version"] == 2


def test_duplicate_txid_in_block_and_across_blocks(localnet):
    d = localnet.issue("org1", "d")
    tx = reg(localnet, d)
    assert localnet.order([tx, tx]) == [VC.VALID, VC.DUPLICATE_TXID]
    assert localnet.order([tx]) == [VC.DUPLICATE_TXID]


def test_bad_endorsement_signature(localnet):
    d = localnet.issue("org1", "d")
    tx = reg(localnet, d)
    e = tx.endorsements[0]
    forged = replace(tx, endorsements=(Endorsement(e.endorser_cert, bytes(64)),) + tx.endorsements[1:])
    assert localnet.order([forged]) == [VC.BAD_SIGNATURE]


def test_tampered_write_set_breaks_signatures(localnet):
    d = localnet.issue("org1", "d")
    tx = reg(localnet, d)
    key = tx.write_set[0][0]
    forged = replace(tx, write_set=((key, b'{"evil":true}'),))
    assert localnet.order([forged]) == [VC.BAD_SIGNATURE]
    assert key not in localnet.all_peers[0].state


def test_policy_failure_single_org():
    net = LocalNetwork(orgs=("org1", "org2", "org3"), peers_per_org=1)
    d = net.issue("org1", "d")
    assert net.order([net.endorse(d, "device-registry/register", ["x"], orgs=["org1"])]) == [VC.ENDORSEMENT_POLICY_FAILURE]
    assert net.order([net.endorse(d, "device-registry/register", ["x"], orgs=["org1", "org3"])]) == [VC.VALID]


def test_reader_creator_denied_at_commit(localnet):
    r = localnet.issue("org1", "r", Role.READER)
    prop = localnet.proposal(r, "device-registry/get-all", ["org1"])
    tx = assemble_transaction([localnet.peers[o][0].simulate(prop) for o in ("org1", "org2")], prop)
    assert localnet.order([tx]) == [VC.ACCESS_DENIED]


def test_precedence_signature_over_duplicate(localnet):
    d = localnet.issue("org1", "d")
    tx = reg(localnet, d)
    localnet.order([tx])
    e = tx.endorsements[0]
    forged = replace(tx, endorsements=(Endorsement(e.endorser_cert, bytes(64)),) + tx.endorsements[1:])
    one_org = replace(tx, endorsements=tx.endorsements[:1])
    assert localnet.order([forged, one_org, tx]) == [VC.BAD_SIGNATURE, VC.ENDORSEMENT_POLICY_FAILURE, VC.DUPLICATE_TXID]


def test_invalid_leaves_state_untouched(localnet):
    d = localnet.issue("org1", "d")
    localnet.submit(d, "device-registry/register", ["a"])
    before = localnet.all_peers[0].state.content_hash()
    tx = localnet.endorse(d, "device-registry/register", ["b"])
    bad = replace(tx, endorsements=tx.endorsements[:1])
    localnet.order([bad])
    assert localnet.all_peers[0].state.content_hash() == before


def test_revoked_client_rejected_at_endorsement(localnet):
    d = localnet.issue("org1", "d")
    localnet.revoke(d)
    with pytest.raises(Revoked):
        reg(localnet, d)


def test_proposal_checks(localnet):
    d = localnet.issue("org1", "d")
    p = create_proposal(d, "device-registry/register", ["x"])
    with pytest.raises(InvalidProposal):
        localnet.all_peers[0].simulate(replace(p, args=(b"y",)))
    with pytest.raises(UnknownOperation):
        localnet.all_peers[0].simulate(create_proposal(d, "nope/op"))
    with pytest.raises(ValidationError):
        localnet.all_peers[0].simulate(create_proposal(d, "device-registry/get", []))


def test_simulator_read_your_writes():
    ws = WorldState()
    ws.apply_write_set([("a/1", b"x"), ("a/2", b"y")], Version(1, 0))
    sim = TxSimulator(ws)
    sim.put("a/3", b"z")
    assert sim.get("a/3") == b"z"
    sim.delete("a/1")
    assert [k for k, _ in sim.scan("a/")] == ["a/2", "a/3"]
    assert sim.read_set() == (("a/2", Version(1, 0)),)
    assert sim.write_set() == (("a/1", None), ("a/3", b"z"))


def test_policy_majority():
    p = EndorsementPolicy(frozenset({"a", "b", "c", "d"}))
    assert p.required == 3
    assert not p.satisfied_by({"a", "b", "x"})
    with pytest.raises(ValidationError):
        EndorsementPolicy(frozenset())


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(1, 4)), min_size=1, max_size=12))
def test_replay_matches_live_state(ops):
    net = LocalNetwork(peers_per_org=1)
    devs = [net.issue("org1", f"d{i}") for i in range(3)]
    for d in devs:
        net.submit(d, "device-registry/register", ["x"])
    batch = [net.endorse(devs[i], "service-registry/register", ["s", str(v)]) for i, v in ops]
    codes = net.order(batch)
    for p in net.all_peers:
        state, replayed = p.replay_state()
        assert state.content_hash() == p.state.content_hash()
        assert replayed[-1] == codes
    # per device the first tx wins: later ones read a version the first one bumped
    seen = set()
    for (i, _), c in zip(ops, codes):
        assert (c is VC.VALID) == (i not in seen)
        seen.add(i)


def test_simulate_examples(localnet):
    d = localnet.issue("org1", "d")
    peer = localnet.all_peers[0]
    r = peer.simulate(localnet.proposal(d, "device-registry/register", ["thermo"]))
    assert r.read_set == () and len(r.write_set) == 1
    localnet.submit(d, "device-registry/register", ["thermo"])
    prop = localnet.proposal(d, "device-registry/get", ["org1", derive_device_id(d.certificate)])
    a, b = peer.simulate(prop), localnet.all_peers[1].simulate(prop)
    assert a.read_set and a.write_set == ()
    assert a.results == b.results


def test_assemble_examples(localnet):
    from chainiot.errors import EndorsementMismatch

    d = localnet.issue("org1", "d")
    prop = localnet.proposal(d, "device-registry/register", ["x"])
    rs = [localnet.peers[o][0].simulate(prop) for o in ("org1", "org2")]
    assert len(assemble_transaction(rs, prop).endorsements) == 2
    other = localnet.peers["org2"][0].simulate(create_proposal(d, "device-registry/register", ["y"], tx_id=prop.tx_id))
    with pytest.raises(EndorsementMismatch):
        assemble_transaction([rs[0], other], prop)
    with pytest.raises(ValidationError):
        assemble_transaction([], prop)


def test_written_keys_carry_commit_version(localnet):
    d = localnet.issue("org1", "d")
    e = localnet.issue("org1", "e")
    localnet.submit(d, "device-registry/register", ["a"])
    txs = [localnet.endorse(d, "service-registry/register", ["s", "1"]),
           localnet.endorse(e, "device-registry/register", ["b"])]
    localnet.order(txs)
    peer = localnet.all_peers[0]
    height = peer.height - 1
    for idx, tx in enumerate(txs):
        for key, _ in tx.write_set:
            assert peer.state.version(key) == Version(height, idx)
