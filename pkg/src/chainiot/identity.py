"""Certificates, certificate authorities, revocation and wallets.

Certificates are self-defined canonical records signed with Ed25519 by the
issuing organization's root key.  A :class:`MembershipDirectory` maps each
org to its root public key and revoked serials and is the only thing needed
to resolve a certificate to ``(orgId, role)``.
"""

from __future__ import annotations

import enum
import fcntl
import functools
import os
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple

import nacl.exceptions
import nacl.signing

from . import canonical
from .canonical import b64d, b64e
from .errors import (
    BadSignature,
    Expired,
    NotYetValid,
    Revoked,
    UnknownIssuer,
    UnknownOrg,
    ValidationError,
)

SIGNATURE_LENGTH = 64


class Role(str, enum.Enum):
    READER = "reader"
    WRITER = "writer"
    ADMIN = "admin"

    @property
    def can_write(self) -> bool:
        return self is not Role.READER


@dataclass(frozen=True)
class Certificate:
    serial: int
    subject: str
    org_id: str
    role: Role
    public_key: bytes
    not_before: datetime
    not_after: datetime
    issuer_org_id: str
    issuer_signature: bytes = b""

    def to_dict(self, include_signature: bool = True) -> dict:
        d = {
            "serial": self.serial,
            "subject": self.subject,
            "orgId": self.org_id,
            "role": self.role.value,
            "publicKey": b64e(self.public_key),
            "notBefore": canonical.format_time(self.not_before),
            "notAfter": canonical.format_time(self.not_after),
            "issuerOrgId": self.issuer_org_id,
        }
        if include_signature:
            d["issuerSignature"] = b64e(self.issuer_signature)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        return _cert_from_encoded(canonical.encode(d))

    @cached_property
    def tbs_bytes(self) -> bytes:
        """Canonical encoding of every field except the issuer signature."""
        return canonical.encode(self.to_dict(include_signature=False))

    @cached_property
    def encoded(self) -> bytes:
        return canonical.encode(self.to_dict())

    @cached_property
    def wire(self) -> dict:
        return self.to_dict()


@functools.lru_cache(maxsize=4096)
def _cert_from_encoded(data: bytes) -> Certificate:
    d = canonical.decode(data)
    try:
        return Certificate(
            serial=int(d["serial"]),
            subject=str(d["subject"]),
            org_id=str(d["orgId"]),
            role=Role(d["role"]),
            public_key=b64d(d["publicKey"]),
            not_before=canonical.parse_time(d["notBefore"]),
            not_after=canonical.parse_time(d["notAfter"]),
            issuer_org_id=str(d["issuerOrgId"]),
            issuer_signature=b64d(d.get("issuerSignature", "")),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed certificate: {exc}") from None


class Identity:
    """A certificate plus the matching private signing capability."""

    __slots__ = ("certificate", "_key")

    def __init__(self, certificate: Certificate, signing_key: nacl.signing.SigningKey):
        self.certificate = certificate
        self._key = signing_key

    def sign(self, message: bytes) -> bytes:
        return self._key.sign(message).signature

    @property
    def org_id(self) -> str:
        return self.certificate.org_id

    @property
    def role(self) -> Role:
        return self.certificate.role

    def to_dict(self) -> dict:
        return {"certificate": self.certificate.to_dict(), "privateKey": b64e(bytes(self._key))}

    @classmethod
    def from_dict(cls, d: dict) -> "Identity":
        return cls(Certificate.from_dict(d["certificate"]), nacl.signing.SigningKey(b64d(d["privateKey"])))

    def __repr__(self) -> str:
        c = self.certificate
        return f"Identity({c.subject!r}, org={c.org_id!r}, role={c.role.value}, serial={c.serial})"


def sign(identity: Identity, message: bytes) -> bytes:
    return identity.sign(message)


def _verify_raw(public_key: bytes, message: bytes, signature: bytes) -> bool:
    if len(signature) != SIGNATURE_LENGTH or len(public_key) != 32:
        return False
    try:
        nacl.signing.VerifyKey(public_key).verify(message, signature)
        return True
    except (nacl.exceptions.BadSignatureError, nacl.exceptions.ValueError, TypeError):
        return False


def verify_signature(cert: Certificate, message: bytes, signature: bytes) -> bool:
    return _verify_raw(cert.public_key, message, signature)


@functools.lru_cache(maxsize=8192)
def _issuer_signature_ok(root_key: bytes, tbs: bytes, signature: bytes) -> bool:
    # pure in its arguments, so memoizing is safe
    return _verify_raw(root_key, tbs, signature)


def derive_device_id(cert: Certificate) -> str:
    return canonical.sha256(cert.encoded).hex()


class VerifiedCaller(NamedTuple):
    org_id: str
    role: Role


@dataclass(frozen=True)
class MembershipDirectory:
    root_keys: dict[str, bytes] = field(default_factory=dict)
    crls: dict[str, frozenset[int]] = field(default_factory=dict)

    def __post_init__(self):
        stray = set(self.crls) - set(self.root_keys)
        if stray:
            raise ValidationError(f"CRL for unknown orgs: {sorted(stray)}")

    @property
    def orgs(self) -> list[str]:
        return sorted(self.root_keys)

    def with_org(self, org_id: str, root_public_key: bytes) -> "MembershipDirectory":
        return replace(self, root_keys={**self.root_keys, org_id: root_public_key})

    def is_revoked(self, org_id: str, serial: int) -> bool:
        return serial in self.crls.get(org_id, ())

    def to_roots_dict(self) -> dict:
        return {"orgs": {org: b64e(key) for org, key in sorted(self.root_keys.items())}}

    def to_crl_dict(self) -> dict:
        return {"crls": {org: sorted(s) for org, s in sorted(self.crls.items()) if s}}

    @classmethod
    def from_dicts(cls, roots: dict, crl: dict | None = None) -> "MembershipDirectory":
        keys = {org: b64d(k) for org, k in roots["orgs"].items()}
        crls = {org: frozenset(int(s) for s in serials) for org, serials in (crl or {}).get("crls", {}).items()}
        return cls(keys, crls)

    def save(self, roots_path, crl_path) -> None:
        canonical.dump_file(roots_path, self.to_roots_dict())
        canonical.dump_file(crl_path, self.to_crl_dict())

    @classmethod
    def load(cls, roots_path, crl_path) -> "MembershipDirectory":
        crl = canonical.load_file(crl_path) if os.path.exists(crl_path) else None
        return cls.from_dicts(canonical.load_file(roots_path), crl)


def revoke_identity(directory: MembershipDirectory, org_id: str, serial: int) -> MembershipDirectory:
    if org_id not in directory.root_keys:
        raise UnknownOrg(f"unknown org {org_id!r}")
    revoked = directory.crls.get(org_id, frozenset()) | {int(serial)}
    return replace(directory, crls={**directory.crls, org_id: revoked})


def check_issuer(directory: MembershipDirectory, cert: Certificate) -> VerifiedCaller:
    """Signature-only check; no clock and no CRL, so it is deterministic."""
    root = directory.root_keys.get(cert.issuer_org_id)
    if root is None or cert.issuer_org_id != cert.org_id:
        raise UnknownIssuer(f"no root for issuer {cert.issuer_org_id!r}")
    if not _issuer_signature_ok(root, cert.tbs_bytes, cert.issuer_signature):
        raise BadSignature(f"certificate {cert.subject!r} has an invalid issuer signature")
    return VerifiedCaller(cert.org_id, cert.role)


def verify_certificate(directory: MembershipDirectory, cert: Certificate, now: datetime) -> VerifiedCaller:
    caller = check_issuer(directory, cert)
    if now < cert.not_before:
        raise NotYetValid(f"certificate {cert.subject!r} not valid before {cert.not_before.isoformat()}")
    if now > cert.not_after:
        raise Expired(f"certificate {cert.subject!r} expired at {cert.not_after.isoformat()}")
    if directory.is_revoked(cert.org_id, cert.serial):
        raise Revoked(f"certificate {cert.subject!r} (serial {cert.serial}) is revoked")
    return caller


class CertificateAuthority:
    """Issues identities for one org; root certificate has serial 0."""

    def __init__(self, root: Identity, next_serial: int = 1):
        self.root = root
        self._next_serial = next_serial
        self._lock = threading.Lock()

    @property
    def org_id(self) -> str:
        return self.root.org_id

    @property
    def public_key(self) -> bytes:
        return self.root.certificate.public_key

    @classmethod
    def create(cls, org_id: str, now: datetime | None = None, years: int = 10) -> "CertificateAuthority":
        now = now or canonical.utcnow()
        key = nacl.signing.SigningKey.generate()
        cert = Certificate(
            serial=0,
            subject=f"ca.{org_id}",
            org_id=org_id,
            role=Role.ADMIN,
            public_key=bytes(key.verify_key),
            not_before=now,
            not_after=now + timedelta(days=365 * years),
            issuer_org_id=org_id,
        )
        cert = replace(cert, issuer_signature=key.sign(cert.tbs_bytes).signature)
        return cls(Identity(cert, key))

    def issue(self, subject: str, role: Role | str, not_before: datetime, not_after: datetime) -> Identity:
        if not_before >= not_after:
            raise ValidationError("validity window must satisfy notBefore < notAfter")
        key = nacl.signing.SigningKey.generate()
        with self._lock:
            serial = self._next_serial
            self._next_serial += 1
        cert = Certificate(
            serial=serial,
            subject=subject,
            org_id=self.org_id,
            role=Role(role),
            public_key=bytes(key.verify_key),
            not_before=not_before,
            not_after=not_after,
            issuer_org_id=self.org_id,
        )
        cert = replace(cert, issuer_signature=self.root.sign(cert.tbs_bytes))
        return Identity(cert, key)

    def to_dict(self) -> dict:
        return {"root": self.root.to_dict(), "nextSerial": self._next_serial}

    @classmethod
    def from_dict(cls, d: dict) -> "CertificateAuthority":
        return cls(Identity.from_dict(d["root"]), int(d["nextSerial"]))


def issue_identity(
    ca: CertificateAuthority,
    subject: str,
    role: Role | str,
    validity: tuple[datetime, datetime],
) -> Identity:
    return ca.issue(subject, role, validity[0], validity[1])


def issue_from_ca_file(path, subject: str, role: Role | str, validity: tuple[datetime, datetime]) -> Identity:
    """Issue against a CA persisted on disk, serializing concurrent issuers with a file lock."""
    return issue_many_from_ca_file(path, [subject], role, validity)[0]


def issue_many_from_ca_file(path, subjects: Iterable[str], role: Role | str,
                            validity: tuple[datetime, datetime]) -> list[Identity]:
    path = Path(path)
    with open(path.with_suffix(".lock"), "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        ca = CertificateAuthority.from_dict(canonical.load_file(path))
        out = [issue_identity(ca, s, role, validity) for s in subjects]
        canonical.dump_file(path, ca.to_dict())
    return out


class Wallet:
    """Label -> Identity; may hold identities from several orgs."""

    def __init__(self, entries: dict[str, Identity] | None = None):
        self._entries: dict[str, Identity] = dict(entries or {})

    def put(self, label: str, identity: Identity, overwrite: bool = False) -> None:
        if label in self._entries and not overwrite:
            raise ValidationError(f"wallet label {label!r} already in use")
        self._entries[label] = identity

    def get(self, label: str) -> Identity:
        try:
            return self._entries[label]
        except KeyError:
            raise ValidationError(f"no identity labelled {label!r}") from None

    def labels(self) -> list[str]:
        return sorted(self._entries)

    def for_org(self, org_id: str) -> list[Identity]:
        return [i for _, i in sorted(self._entries.items()) if i.org_id == org_id]

    def __contains__(self, label: str) -> bool:
        return label in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def to_dict(self) -> dict:
        return {"entries": {label: ident.to_dict() for label, ident in sorted(self._entries.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "Wallet":
        return cls({label: Identity.from_dict(v) for label, v in d["entries"].items()})

    def save(self, path) -> None:
        canonical.dump_file(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "Wallet":
        return cls.from_dict(canonical.load_file(path))


def default_validity(now: datetime | None = None, days: int = 365) -> tuple[datetime, datetime]:
    now = now or canonical.utcnow()
    return (now - timedelta(minutes=5), now + timedelta(days=days))


def build_directory(cas: Iterable[CertificateAuthority]) -> MembershipDirectory:
    return MembershipDirectory({ca.org_id: ca.public_key for ca in cas})
