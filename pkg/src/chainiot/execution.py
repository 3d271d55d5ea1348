"""Execute-order-validate: simulate proposals, assemble endorsed transactions, validate blocks."""

from __future__ import annotations

import logging
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from functools import cached_property
from typing import Callable, Iterable, Optional, Sequence

from . import canonical
from .canonical import b64d, b64e
from .contracts import OPERATIONS, ContractContext, Operation
from .errors import (
    AccessDenied,
    CertificateError,
    EndorsementMismatch,
    InvalidProposal,
    UnknownOperation,
    ValidationError,
)
from .identity import (
    Certificate,
    Identity,
    MembershipDirectory,
    Role,
    check_issuer,
    verify_certificate,
    verify_signature,
)
from .ledger import (
    Block,
    BlockStore,
    Endorsement,
    ReadEntry,
    Transaction,
    ValidationCode,
    Version,
    WorldState,
    WriteEntry,
    read_set_from_wire,
    read_set_to_wire,
    results_bytes,
    write_set_from_wire,
    write_set_to_wire,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Proposal:
    tx_id: str
    client_cert: Certificate
    contract_op: str
    args: tuple[bytes, ...]
    client_timestamp: datetime
    client_signature: bytes = b""

    def body(self) -> dict:
        return {
            "txId": self.tx_id,
            "client": self.client_cert.wire,
            "contractOp": self.contract_op,
            "args": [b64e(a) for a in self.args],
            "clientTimestamp": canonical.format_time(self.client_timestamp),
        }

    @cached_property
    def signed_bytes(self) -> bytes:
        return canonical.encode(self.body())

    def to_dict(self) -> dict:
        return {**self.body(), "clientSignature": b64e(self.client_signature)}

    @classmethod
    def from_dict(cls, d: dict) -> "Proposal":
        try:
            return cls(
                tx_id=str(d["txId"]),
                client_cert=Certificate.from_dict(d["client"]),
                contract_op=str(d["contractOp"]),
                args=tuple(b64d(a) for a in d["args"]),
                client_timestamp=canonical.parse_time(d["clientTimestamp"]),
                client_signature=b64d(d["clientSignature"]),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidProposal(f"malformed proposal: {exc!r}") from None

    def signature_valid(self) -> bool:
        return verify_signature(self.client_cert, self.signed_bytes, self.client_signature)


def create_proposal(
    identity: Identity,
    contract_op: str,
    args: Iterable[bytes | str] = (),
    timestamp: datetime | None = None,
    tx_id: str | None = None,
) -> Proposal:
    raw = tuple(a.encode("utf-8") if isinstance(a, str) else bytes(a) for a in args)
    p = Proposal(tx_id or uuid.uuid4().hex, identity.certificate, contract_op, raw, timestamp or canonical.utcnow())
    return Proposal(p.tx_id, p.client_cert, p.contract_op, p.args, p.client_timestamp, identity.sign(p.signed_bytes))


@dataclass(frozen=True)
class ProposalResponse:
    tx_id: str
    read_set: tuple[ReadEntry, ...]
    write_set: tuple[WriteEntry, ...]
    result_payload: bytes
    endorser_cert: Certificate
    endorser_signature: bytes

    @cached_property
    def results(self) -> bytes:
        return results_bytes(self.tx_id, self.read_set, self.write_set, self.result_payload)

    def signature_valid(self) -> bool:
        return verify_signature(self.endorser_cert, self.results, self.endorser_signature)

    def to_dict(self) -> dict:
        return {
            "txId": self.tx_id,
            "readSet": read_set_to_wire(self.read_set),
            "writeSet": write_set_to_wire(self.write_set),
            "resultPayload": b64e(self.result_payload),
            "endorser": self.endorser_cert.wire,
            "endorserSignature": b64e(self.endorser_signature),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProposalResponse":
        return cls(
            tx_id=d["txId"],
            read_set=read_set_from_wire(d["readSet"]),
            write_set=write_set_from_wire(d["writeSet"]),
            result_payload=b64d(d["resultPayload"]),
            endorser_cert=Certificate.from_dict(d["endorser"]),
            endorser_signature=b64d(d["endorserSignature"]),
        )


@dataclass(frozen=True)
class EndorsementPolicy:
    org_set: frozenset[str]
    rule: str = "MAJORITY"

    def __post_init__(self):
        if self.rule != "MAJORITY":
            raise ValidationError(f"unsupported endorsement rule {self.rule!r}")
        if not self.org_set:
            raise ValidationError("endorsement policy needs at least one org")

    @property
    def required(self) -> int:
        return len(self.org_set) // 2 + 1

    def satisfied_by(self, orgs: Iterable[str]) -> bool:
        return len(set(orgs) & self.org_set) >= self.required


class TxSimulator:
    """Records reads (with versions) and buffers writes against a committed state.

    Reads of keys the simulation itself wrote are served from the write buffer
    and add no read-set entry.
    """

    def __init__(self, state: WorldState):
        self._state = state
        self.reads: dict[str, Optional[Version]] = {}
        self.writes: dict[str, Optional[bytes]] = {}

    def _record(self, key: str, entry) -> None:
        if key not in self.reads:
            self.reads[key] = None if entry is None else entry[1]

    def get(self, key: str) -> Optional[bytes]:
        if key in self.writes:
            return self.writes[key]
        entry = self._state.get(key)
        self._record(key, entry)
        return None if entry is None else entry[0]

    def put(self, key: str, value: bytes) -> None:
        if not isinstance(value, (bytes, bytearray)):
            raise TypeError("state values are byte strings")
        self.writes[key] = bytes(value)

    def delete(self, key: str) -> None:
        self.writes[key] = None

    def scan(self, prefix: str) -> list[tuple[str, bytes]]:
        merged: dict[str, Optional[bytes]] = {}
        for key in self._state.keys_with_prefix(prefix):
            if key in self.writes:
                continue
            entry = self._state.get(key)
            self._record(key, entry)
            merged[key] = entry[0]
        for key, value in self.writes.items():
            if key.startswith(prefix):
                merged[key] = value
        return [(k, v) for k, v in sorted(merged.items()) if v is not None]

    def read_set(self) -> tuple[ReadEntry, ...]:
        return tuple(sorted(self.reads.items()))

    def write_set(self) -> tuple[WriteEntry, ...]:
        return tuple(sorted(self.writes.items()))


def run_contract(
    state: WorldState,
    proposal: Proposal,
    caller_org: str,
    caller_role: Role,
    operations: dict[str, Operation] = OPERATIONS,
) -> tuple[tuple[ReadEntry, ...], tuple[WriteEntry, ...], bytes]:
    op = operations.get(proposal.contract_op)
    if op is None:
        raise UnknownOperation(f"unknown operation {proposal.contract_op!r}")
    sim = TxSimulator(state)
    ctx = ContractContext(sim, proposal.client_cert, caller_org, caller_role, proposal.client_timestamp, proposal.tx_id)
    try:
        result = op.fn(ctx, *proposal.args)
    except TypeError as exc:
        raise ValidationError(f"bad arguments for {proposal.contract_op}: {exc}") from None
    return sim.read_set(), sim.write_set(), result


def assemble_transaction(responses: Sequence[ProposalResponse], proposal: Proposal) -> Transaction:
    if not responses:
        raise ValidationError("at least one proposal response is required")
    first = responses[0]
    for r in responses[1:]:
        if r.results != first.results:
            raise EndorsementMismatch(f"endorsers disagree on the results of {proposal.tx_id}")
    if first.tx_id != proposal.tx_id:
        raise EndorsementMismatch("response does not answer this proposal")
    return Transaction(
        tx_id=proposal.tx_id,
        creator_cert=proposal.client_cert,
        contract_op=proposal.contract_op,
        args=proposal.args,
        client_timestamp=proposal.client_timestamp,
        read_set=first.read_set,
        write_set=first.write_set,
        result_payload=first.result_payload,
        endorsements=tuple(Endorsement(r.endorser_cert, r.endorser_signature) for r in responses),
    )


CommitListener = Callable[[Block], None]


class Peer:
    """Ledger-hosting node core: endorses proposals and validates/commits blocks.

    Not thread-safe; the node's event loop serializes all calls.
    """

    def __init__(
        self,
        identity: Identity,
        directory: MembershipDirectory,
        policy: EndorsementPolicy,
        store: BlockStore | None = None,
        operations: dict[str, Operation] = OPERATIONS,
        clock: Callable[[], datetime] = canonical.utcnow,
    ):
        self.identity = identity
        self.directory = directory
        self.policy = policy
        self.operations = operations
        self.clock = clock
        self.store = store if store is not None else BlockStore()
        self.state = WorldState()
        self.valid_tx_ids: set[str] = set()
        self.listeners: list[CommitListener] = []
        self.simulations = 0

    @property
    def name(self) -> str:
        return self.identity.certificate.subject

    @property
    def org_id(self) -> str:
        return self.identity.org_id

    @property
    def height(self) -> int:
        return self.store.height

    def authenticate(self, proposal: Proposal):
        if not proposal.signature_valid():
            raise InvalidProposal("proposal signature does not verify")
        return verify_certificate(self.directory, proposal.client_cert, self.clock())

    def simulate(self, proposal: Proposal) -> ProposalResponse:
        caller = self.authenticate(proposal)
        self.simulations += 1
        read_set, write_set, result = run_contract(self.state, proposal, caller.org_id, caller.role, self.operations)
        results = results_bytes(proposal.tx_id, read_set, write_set, result)
        return ProposalResponse(
            proposal.tx_id, read_set, write_set, result, self.identity.certificate, self.identity.sign(results)
        )

    # -- commit path ----------------------------------------------------------

    def _code_for(self, tx: Transaction, seen_in_block: set[str]) -> ValidationCode:
        try:
            check_issuer(self.directory, tx.creator_cert)
            endorser_orgs = set()
            for e in tx.endorsements:
                check_issuer(self.directory, e.endorser_cert)
                if not verify_signature(e.endorser_cert, tx.signed_results, e.signature):
                    return ValidationCode.BAD_SIGNATURE
                endorser_orgs.add(e.endorser_cert.org_id)
        except CertificateError:
            return ValidationCode.BAD_SIGNATURE
        if not self.policy.satisfied_by(endorser_orgs):
            return ValidationCode.ENDORSEMENT_POLICY_FAILURE
        if not tx.creator_cert.role.can_write:
            return ValidationCode.ACCESS_DENIED
        if tx.tx_id in self.valid_tx_ids or tx.tx_id in seen_in_block:
            return ValidationCode.DUPLICATE_TXID
        for key, version in tx.read_set:
            if self.state.version(key) != version:
                return ValidationCode.MVCC_CONFLICT
        return ValidationCode.VALID

    def validate_and_commit(self, block: Block) -> list[ValidationCode]:
        self.store.check_next(block)
        codes: list[ValidationCode] = []
        seen: set[str] = set()
        for index, tx in enumerate(block.transactions):
            code = self._code_for(tx, seen)
            seen.add(tx.tx_id)
            if code is ValidationCode.VALID:
                self.state.apply_write_set(tx.write_set, Version(block.number, index))
                self.valid_tx_ids.add(tx.tx_id)
            codes.append(code)
        block.metadata = list(codes)
        self.store.append(block)
        for listener in self.listeners:
            listener(block)
        return codes

    def replay_state(self) -> tuple[WorldState, list[list[ValidationCode]]]:
        """Rebuild state from genesis through a scratch peer; used for consistency checks."""
        scratch = Peer(self.identity, self.directory, self.policy, BlockStore(), self.operations, self.clock)
        codes = []
        for block in self.store:
            copy = Block(block.number, block.prev_hash, block.data_hash, block.transactions)
            codes.append(scratch.validate_and_commit(copy))
        return scratch.state, codes

    def load_chain(self, blocks: Iterable[Block]) -> None:
        """Adopt an existing persisted chain by recomputing state from it."""
        for block in blocks:
            copy = Block(block.number, block.prev_hash, block.data_hash, block.transactions)
            codes = self._replay_one(copy)
            if block.metadata and [c.value for c in codes] != [c.value for c in block.metadata]:
                log.warning("block %d: recomputed validation codes differ from stored metadata", block.number)

    def _replay_one(self, block: Block) -> list[ValidationCode]:
        codes = []
        seen: set[str] = set()
        for index, tx in enumerate(block.transactions):
            code = self._code_for(tx, seen)
            seen.add(tx.tx_id)
            if code is ValidationCode.VALID:
                self.state.apply_write_set(tx.write_set, Version(block.number, index))
                self.valid_tx_ids.add(tx.tx_id)
            codes.append(code)
        return codes


def simulate(peer: Peer, proposal: Proposal) -> ProposalResponse:
    return peer.simulate(proposal)


def validate_and_commit(peer: Peer, block: Block) -> list[ValidationCode]:
    return peer.validate_and_commit(block)
