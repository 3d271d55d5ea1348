"""Synchronous in-process consortium: CAs, peers and a block cutter wired by direct calls.

Used by property suites and unit tests that need the whole endorse-order-commit
pipeline without sockets.  Semantics match the networked gateway: one
endorsement per policy org, MAJORITY validation on every peer.
"""

from __future__ import annotations

import itertools
from datetime import datetime, timedelta
from typing import Iterable, Sequence

from . import canonical
from .errors import AccessDenied, ValidationError
from .execution import (
    EndorsementPolicy,
    Peer,
    Proposal,
    assemble_transaction,
    create_proposal,
)
from .contracts import READ_OPERATIONS
from .identity import CertificateAuthority, Identity, MembershipDirectory, Role, build_directory, revoke_identity
from .ledger import BlockStore, Transaction, ValidationCode, genesis_block, make_block
from .ordering.cutter import BatchConfig, BlockCutter


class LocalNetwork:
    def __init__(self, orgs: Sequence[str] = ("org1", "org2"), peers_per_org: int = 2,
                 batch: BatchConfig | None = None, now: datetime | None = None):
        self.now = now or canonical.utcnow()
        self.cas = {org: CertificateAuthority.create(org, now=self.now - timedelta(days=1)) for org in orgs}
        self.directory = build_directory(self.cas.values())
        self.policy = EndorsementPolicy(frozenset(orgs))
        self.peers: dict[str, list[Peer]] = {}
        for org in orgs:
            self.peers[org] = []
            for i in range(peers_per_org):
                ident = self.issue(org, f"peer{i}.{org}", Role.ADMIN)
                peer = Peer(ident, self.directory, self.policy, clock=lambda: self.now)
                peer.validate_and_commit(genesis_block())
                self.peers[org].append(peer)
        self.cutter = BlockCutter(batch or BatchConfig(max_message_count=10_000, preferred_max_bytes=64 << 20,
                                                       absolute_max_bytes=128 << 20))
        self._clock = itertools.count(1)

    # -- identities -----------------------------------------------------------

    def issue(self, org: str, subject: str, role: Role | str = Role.WRITER) -> Identity:
        return self.cas[org].issue(subject, role, self.now - timedelta(hours=1), self.now + timedelta(days=365))

    def revoke(self, identity: Identity) -> None:
        self.directory = revoke_identity(self.directory, identity.org_id, identity.certificate.serial)
        for peer in self.all_peers:
            peer.directory = self.directory

    @property
    def all_peers(self) -> list[Peer]:
        return [p for org in sorted(self.peers) for p in self.peers[org]]

    def tick(self) -> datetime:
        """Strictly increasing client timestamps for deterministic records."""
        return self.now + timedelta(microseconds=next(self._clock))

    # -- client operations ----------------------------------------------------

    def proposal(self, identity: Identity, op: str, args: Iterable = ()) -> Proposal:
        return create_proposal(identity, op, args, timestamp=self.tick())

    def evaluate(self, identity: Identity, op: str, args: Iterable = ()) -> bytes:
        if op not in READ_OPERATIONS:
            raise ValidationError(f"{op} mutates state; use submit")
        peer = self.peers[identity.org_id][0]
        return peer.simulate(self.proposal(identity, op, args)).result_payload

    def endorse(self, identity: Identity, op: str, args: Iterable = (), orgs: Iterable[str] | None = None) -> Transaction:
        prop = self.proposal(identity, op, args)
        # same order as the gateway: certificate first, then role
        self.peers[identity.org_id][0].authenticate(prop)
        if not identity.role.can_write:
            raise AccessDenied("reader role may not submit transactions")
        responses = [self.peers[org][0].simulate(prop) for org in sorted(orgs or self.policy.org_set)]
        return assemble_transaction(responses, prop)

    def order(self, transactions: Sequence[Transaction]) -> list[ValidationCode]:
        """Cut all transactions into one block and commit it on every peer."""
        head = self.all_peers[0]
        block = make_block(head.height, head.store.head_hash, transactions)
        codes = None
        for peer in self.all_peers:
            copy = make_block(block.number, block.prev_hash, block.transactions)
            got = peer.validate_and_commit(copy)
            if codes is not None and got != codes:
                raise AssertionError("peers diverged on validation codes")
            codes = got
        return codes or []

    def submit(self, identity: Identity, op: str, args: Iterable = ()) -> tuple[str, ValidationCode]:
        tx = self.endorse(identity, op, args)
        return tx.tx_id, self.order([tx])[0]
