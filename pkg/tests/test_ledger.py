import os
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from chainiot import canonical
from chainiot.errors import HeightMismatch, PrevHashMismatch, ValidationError
from chainiot.ledger import (
    ZERO_HASH,
    BlockStore,
    Version,
    WorldState,
    compute_block_hash,
    compute_data_hash,
    genesis_block,
    header_bytes,
    make_block,
    verify_chain,
    verify_chain_file,
)
from chainiot.localnet import LocalNetwork

FIXTURES = Path(__file__).parent / "fixtures"

# `sha256sum` outputs over tests/fixtures/{empty_tx_list,genesis_header}.json; frozen
EMPTY_LIST_SHA256 = "4f53cda18c2baa0c0354bb5f9a3ecbe5ed12ab4d8e11ba873c2f11161202b945"
GENESIS_HEADER_SHA256 = "e8c3f8a77a8de74979271c818f38d712b80a3fe77aec7efeebc1dc77bd32b426"


def test_genesis_pinned():
    g = genesis_block()
    assert g.number == 0 and g.prev_hash == ZERO_HASH and g.transactions == ()
    assert g.data_hash.hex() == EMPTY_LIST_SHA256
    assert (FIXTURES / "empty_tx_list.json").read_bytes() == b"[]"
    assert header_bytes(0, ZERO_HASH, g.data_hash) == (FIXTURES / "genesis_header.json").read_bytes()
    assert compute_block_hash(g).hex() == GENESIS_HEADER_SHA256


@pytest.fixture(scope="module")
def chain():
    """Ten blocks of real endorsed transactions."""
    net = LocalNetwork(peers_per_org=1)
    devs = [net.issue("org1", f"d{i}") for i in range(9)]
    txs = [[net.endorse(d, "device-registry/register", [f"dev {i}"])] for i, d in enumerate(devs)]
    blocks = [genesis_block()]
    for batch in txs:
        blocks.append(make_block(len(blocks), compute_block_hash(blocks[-1]), batch))
    return blocks


def test_data_hash_matches_canonical_list(chain):
    b = chain[3]
    assert b.data_hash == canonical.sha256(canonical.encode([tx.to_dict() for tx in b.transactions]))
    assert compute_data_hash(b.transactions) == b.data_hash


def test_store_append_rules(chain):
    s = BlockStore()
    for b in chain[:3]:
        s.append(b)
    assert s.height == 3 and s.head_hash == compute_block_hash(chain[2])
    with pytest.raises(HeightMismatch):
        s.append(chain[4])
    with pytest.raises(HeightMismatch):
        s.append(chain[2])
    forged = make_block(3, b"\x01" * 32, chain[3].transactions)
    with pytest.raises(PrevHashMismatch):
        s.append(forged)
    assert s.height == 3


def test_verify_chain_reports_first_bad(chain):
    assert verify_chain(chain) is None
    tampered = list(chain)
    b4 = tampered[4]
    other = chain[5].transactions
    tampered[4] = type(b4)(b4.number, b4.prev_hash, b4.data_hash, other)
    assert verify_chain(tampered) == 4
    relinked = list(chain)
    relinked[4] = make_block(4, b4.prev_hash, other)  # fresh data hash breaks block 5's link
    assert verify_chain(relinked) == 5


def test_file_round_trip_and_corruption(chain, tmp_path):
    path = tmp_path / "blocks.bin"
    s = BlockStore(path)
    for b in chain:
        s.append(b)
    assert s.bytes_written == os.path.getsize(path)
    reloaded = BlockStore(path)
    assert reloaded.hashes() == s.hashes()
    assert verify_chain_file(path) is None

    data = path.read_bytes()
    for offset in (5, len(data) // 3, len(data) // 2, len(data) - 3):
        bad = bytearray(data)
        bad[offset] ^= 0x01
        path.write_bytes(bytes(bad))
        assert verify_chain_file(path) is not None, offset
    path.write_bytes(data[:-7])
    assert verify_chain_file(path) == len(chain) - 1
    with pytest.raises(ValidationError):
        BlockStore(path)


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_any_byte_flip_detected(chain, tmp_path_factory, data):
    path = tmp_path_factory.mktemp("flip") / "b.bin"
    s = BlockStore(path)
    for b in chain[:4]:
        s.append(b)
    raw = bytearray(path.read_bytes())
    i = data.draw(st.integers(0, len(raw) - 1))
    raw[i] ^= data.draw(st.integers(1, 255))
    path.write_bytes(bytes(raw))
    assert verify_chain_file(path) is not None


def test_world_state():
    ws = WorldState()
    ws.apply_write_set([("dev/o/a", b"1"), ("dev/o/b", b"2"), ("svc/o/a/x", b"3")], Version(1, 0))
    assert ws.get("dev/o/a") == (b"1", Version(1, 0))
    assert ws.keys_with_prefix("dev/o/") == ["dev/o/a", "dev/o/b"]
    ws.apply_write_set([("dev/o/a", None), ("dev/o/b", b"9")], Version(2, 3))
    assert "dev/o/a" not in ws and ws.version("dev/o/b") == Version(2, 3)
    ws.apply_write_set([("missing", None)], Version(3, 0))
    assert len(ws) == 2
    again = WorldState.from_dict(canonical.decode(ws.encoded()))
    assert again.content_hash() == ws.content_hash()
    assert list(again.items()) == list(ws.items())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcdef"), st.one_of(st.none(), st.binary(min_size=1, max_size=4))),
                max_size=30))
def test_state_matches_dict_model(writes):
    ws, model = WorldState(), {}
    for n, (k, v) in enumerate(writes):
        ws.apply_write_set([(k, v)], Version(n, 0))
        if v is None:
            model.pop(k, None)
        else:
            model[k] = v
    assert {k: v for k, (v, _) in ws.items()} == model
    assert ws.keys_with_prefix("") == sorted(model)


def test_block_hash_examples(chain):
    b = chain[2]
    assert compute_block_hash(b) == compute_block_hash(make_block(b.number, b.prev_hash, b.transactions))
    assert compute_block_hash(make_block(3, b.prev_hash, b.transactions)) != compute_block_hash(b)
    s = BlockStore()
    s.append(genesis_block())
    assert s.height == 1 and verify_chain(s) is None
    assert verify_chain(BlockStore()) is None


def test_state_get_examples():
    from chainiot.ledger import apply_write_set, state_get

    ws = WorldState()
    assert state_get(ws, "k") is None
    apply_write_set(ws, [("k", b"v")], Version(2, 0))
    assert state_get(ws, "k") == (b"v", (2, 0))
    apply_write_set(ws, [("k", None)], Version(3, 0))
    assert state_get(ws, "k") is None
