"""Transactions, hash-chained blocks, the append-only block store and world state."""

from __future__ import annotations

import bisect
import enum
import os
import struct
from dataclasses import dataclass, field
from datetime import datetime
from functools import cached_property
from typing import Iterator, NamedTuple, Optional, Sequence

from . import canonical
from .canonical import b64d, b64e
from .errors import HeightMismatch, PrevHashMismatch, ValidationError
from .identity import Certificate

ZERO_HASH = bytes(32)
_LEN = struct.Struct(">I")


class Version(NamedTuple):
    block_number: int
    tx_index: int


class ValidationCode(str, enum.Enum):
    VALID = "VALID"
    MVCC_CONFLICT = "MVCC_CONFLICT"
    ENDORSEMENT_POLICY_FAILURE = "ENDORSEMENT_POLICY_FAILURE"
    BAD_SIGNATURE = "BAD_SIGNATURE"
    DUPLICATE_TXID = "DUPLICATE_TXID"
    ACCESS_DENIED = "ACCESS_DENIED"


# A read of an absent key is recorded with version None.
ReadEntry = tuple[str, Optional[Version]]
# A delete is recorded with value None.
WriteEntry = tuple[str, Optional[bytes]]


def read_set_to_wire(read_set: Sequence[ReadEntry]) -> list:
    return [{"key": k, "version": None if v is None else [v[0], v[1]]} for k, v in read_set]


def read_set_from_wire(items: list) -> tuple[ReadEntry, ...]:
    out = []
    for it in items:
        v = it["version"]
        out.append((it["key"], None if v is None else Version(int(v[0]), int(v[1]))))
    return tuple(out)


def write_set_to_wire(write_set: Sequence[WriteEntry]) -> list:
    return [
        {"key": k, "delete": True} if v is None else {"key": k, "value": b64e(v)}
        for k, v in write_set
    ]


def write_set_from_wire(items: list) -> tuple[WriteEntry, ...]:
    return tuple((it["key"], None if it.get("delete") else b64d(it["value"])) for it in items)


@dataclass(frozen=True)
class Endorsement:
    endorser_cert: Certificate
    signature: bytes

    def to_dict(self) -> dict:
        return {"endorser": self.endorser_cert.wire, "signature": b64e(self.signature)}

    @classmethod
    def from_dict(cls, d: dict) -> "Endorsement":
        return cls(Certificate.from_dict(d["endorser"]), b64d(d["signature"]))


def results_bytes(tx_id: str, read_set, write_set, result_payload: bytes) -> bytes:
    """The bytes every endorser signs over."""
    return canonical.encode(
        {
            "txId": tx_id,
            "readSet": read_set_to_wire(read_set),
            "writeSet": write_set_to_wire(write_set),
            "resultPayload": b64e(result_payload),
        }
    )


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    creator_cert: Certificate
    contract_op: str
    args: tuple[bytes, ...]
    client_timestamp: datetime
    read_set: tuple[ReadEntry, ...]
    write_set: tuple[WriteEntry, ...]
    result_payload: bytes
    endorsements: tuple[Endorsement, ...]

    def __post_init__(self):
        if len({k for k, _ in self.write_set}) != len(self.write_set):
            raise ValidationError("duplicate key in write set")
        if len({k for k, _ in self.read_set}) != len(self.read_set):
            raise ValidationError("duplicate key in read set")

    def to_dict(self) -> dict:
        return {
            "txId": self.tx_id,
            "creator": self.creator_cert.wire,
            "contractOp": self.contract_op,
            "args": [b64e(a) for a in self.args],
            "clientTimestamp": canonical.format_time(self.client_timestamp),
            "readSet": read_set_to_wire(self.read_set),
            "writeSet": write_set_to_wire(self.write_set),
            "resultPayload": b64e(self.result_payload),
            "endorsements": [e.to_dict() for e in self.endorsements],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transaction":
        try:
            return cls(
                tx_id=str(d["txId"]),
                creator_cert=Certificate.from_dict(d["creator"]),
                contract_op=str(d["contractOp"]),
                args=tuple(b64d(a) for a in d["args"]),
                client_timestamp=canonical.parse_time(d["clientTimestamp"]),
                read_set=read_set_from_wire(d["readSet"]),
                write_set=write_set_from_wire(d["writeSet"]),
                result_payload=b64d(d["resultPayload"]),
                endorsements=tuple(Endorsement.from_dict(e) for e in d["endorsements"]),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ValidationError(f"malformed transaction: {exc!r}") from None

    @cached_property
    def encoded(self) -> bytes:
        return canonical.encode(self.to_dict())

    @cached_property
    def signed_results(self) -> bytes:
        return results_bytes(self.tx_id, self.read_set, self.write_set, self.result_payload)


def compute_data_hash(transactions: Sequence[Transaction]) -> bytes:
    # byte-identical to canonical.encode([tx.to_dict() ...])
    return canonical.sha256(b"[" + b",".join(tx.encoded for tx in transactions) + b"]")


def header_bytes(number: int, prev_hash: bytes, data_hash: bytes) -> bytes:
    return canonical.encode({"number": number, "prevHash": b64e(prev_hash), "dataHash": b64e(data_hash)})


@dataclass
class Block:
    number: int
    prev_hash: bytes
    data_hash: bytes
    transactions: tuple[Transaction, ...]
    metadata: list[ValidationCode] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "number": self.number,
            "prevHash": b64e(self.prev_hash),
            "dataHash": b64e(self.data_hash),
            "transactions": [tx.to_dict() for tx in self.transactions],
        }

    @classmethod
    def from_dict(cls, d: dict, metadata: Sequence[str] = ()) -> "Block":
        try:
            return cls(
                number=int(d["number"]),
                prev_hash=b64d(d["prevHash"]),
                data_hash=b64d(d["dataHash"]),
                transactions=tuple(Transaction.from_dict(t) for t in d["transactions"]),
                metadata=[ValidationCode(c) for c in metadata],
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed block: {exc!r}") from None

    @property
    def hash(self) -> bytes:
        return compute_block_hash(self)


def encode_block(block: Block) -> bytes:
    """Canonical bytes of ``block.to_dict()``, assembled from cached transaction encodings."""
    return b"".join((
        b'{"dataHash":"', b64e(block.data_hash).encode("ascii"),
        b'","number":', str(block.number).encode("ascii"),
        b',"prevHash":"', b64e(block.prev_hash).encode("ascii"),
        b'","transactions":[', b",".join(tx.encoded for tx in block.transactions), b"]}",
    ))


def compute_block_hash(block: Block) -> bytes:
    return canonical.sha256(header_bytes(block.number, block.prev_hash, block.data_hash))


def make_block(number: int, prev_hash: bytes, transactions: Sequence[Transaction]) -> Block:
    txs = tuple(transactions)
    return Block(number, prev_hash, compute_data_hash(txs), txs)


def genesis_block() -> Block:
    return make_block(0, ZERO_HASH, ())


# -- persistence ------------------------------------------------------------

def metadata_hash(codes: Sequence[str]) -> str:
    return b64e(canonical.sha256(canonical.encode(list(codes))))


def block_record(block: Block) -> bytes:
    """Persisted form: block body, commit metadata and a digest of the metadata."""
    codes = [c.value for c in block.metadata]
    body = canonical.encode({"block": block.to_dict(), "metadata": codes, "metadataHash": metadata_hash(codes)})
    return _LEN.pack(len(body)) + body


def iter_records(data: bytes) -> Iterator[tuple[int, bytes | None]]:
    """Yield (offset, record body) pairs; a truncated frame yields (offset, None) and stops."""
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            yield pos, None
            return
        (n,) = _LEN.unpack_from(data, pos)
        if pos + 4 + n > len(data):
            yield pos, None
            return
        yield pos, data[pos + 4 : pos + 4 + n]
        pos += 4 + n


def parse_record(body: bytes) -> Block:
    if not canonical.is_canonical(body):
        raise ValidationError("record is not canonically encoded")
    d = canonical.decode(body)
    codes = d.get("metadata")
    if not isinstance(codes, list) or d.get("metadataHash") != metadata_hash(codes):
        raise ValidationError("commit metadata digest mismatch")
    return Block.from_dict(d["block"], codes)


class BlockStore:
    """Append-only chain of blocks, optionally mirrored to a file of length-prefixed records."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = path
        self.blocks: list[Block] = []
        self._head_hash = ZERO_HASH
        self.bytes_written = 0
        if path is not None and os.path.exists(path):
            with open(path, "rb") as fh:
                data = fh.read()
            for _, body in iter_records(data):
                if body is None:
                    raise ValidationError(f"truncated block record in {path}")
                self._append_memory(parse_record(body))

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def head_hash(self) -> bytes:
        return self._head_hash

    def check_next(self, block: Block) -> None:
        if block.number != self.height:
            raise HeightMismatch(f"expected block {self.height}, got {block.number}")
        expected = self._head_hash if self.blocks else ZERO_HASH
        if block.prev_hash != expected:
            raise PrevHashMismatch(f"block {block.number} does not link to the head")

    def _append_memory(self, block: Block) -> None:
        self.check_next(block)
        self.blocks.append(block)
        self._head_hash = compute_block_hash(block)

    def append(self, block: Block) -> None:
        self.check_next(block)
        if self.path is not None:
            rec = block_record(block)
            fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                os.write(fd, rec)
            finally:
                os.close(fd)
            self.bytes_written += len(rec)
        self._append_memory(block)

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    def __getitem__(self, n: int) -> Block:
        return self.blocks[n]

    def hashes(self) -> list[bytes]:
        return [compute_block_hash(b) for b in self.blocks]


def append_block(store: BlockStore, block: Block) -> BlockStore:
    store.append(block)
    return store


def verify_chain(blocks: BlockStore | Sequence[Block]) -> Optional[int]:
    """None if every link and data hash recomputes; otherwise the first bad block number."""
    prev = ZERO_HASH
    for i, block in enumerate(blocks):
        if block.number != i or block.prev_hash != prev:
            return i
        if compute_data_hash(block.transactions) != block.data_hash:
            return i
        prev = compute_block_hash(block)
    return None


def verify_chain_file(path) -> Optional[int]:
    """Like :func:`verify_chain` but walks raw persisted bytes, catching any corruption."""
    with open(path, "rb") as fh:
        data = fh.read()
    prev = ZERO_HASH
    index = 0
    for index, (_, body) in enumerate(iter_records(data)):
        if body is None:
            return index
        try:
            block = parse_record(body)
        except (ValidationError, ValueError, KeyError, TypeError):
            return index
        if block.number != index or block.prev_hash != prev:
            return index
        if compute_data_hash(block.transactions) != block.data_hash:
            return index
        prev = compute_block_hash(block)
    return None


# -- world state -------------------------------------------------------------

class WorldState:
    """Versioned key-value store with an ordered key index for prefix scans."""

    def __init__(self):
        self._entries: dict[str, tuple[bytes, Version]] = {}
        self._keys: list[str] = []

    def get(self, key: str) -> Optional[tuple[bytes, Version]]:
        return self._entries.get(key)

    def version(self, key: str) -> Optional[Version]:
        e = self._entries.get(key)
        return None if e is None else e[1]

    def keys_with_prefix(self, prefix: str) -> list[str]:
        lo = bisect.bisect_left(self._keys, prefix)
        hi = bisect.bisect_left(self._keys, prefix + "\U0010ffff")
        return self._keys[lo:hi]

    def apply_write_set(self, write_set: Sequence[WriteEntry], version: Version) -> None:
        for key, value in write_set:
            if value is None:
                if self._entries.pop(key, None) is not None:
                    del self._keys[bisect.bisect_left(self._keys, key)]
            else:
                if key not in self._entries:
                    bisect.insort(self._keys, key)
                self._entries[key] = (value, version)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def items(self):
        for k in self._keys:
            yield k, self._entries[k]

    def to_dict(self) -> dict:
        return {k: {"value": b64e(v), "version": [ver[0], ver[1]]} for k, (v, ver) in self._entries.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "WorldState":
        ws = cls()
        ws._entries = {k: (b64d(e["value"]), Version(*e["version"])) for k, e in d.items()}
        ws._keys = sorted(ws._entries)
        return ws

    def encoded(self) -> bytes:
        return canonical.encode(self.to_dict())

    def content_hash(self) -> str:
        return canonical.sha256(self.encoded()).hex()


def state_get(state: WorldState, key: str):
    return state.get(key)


def apply_write_set(state: WorldState, write_set: Sequence[WriteEntry], version: Version) -> WorldState:
    state.apply_write_set(write_set, version)
    return state
