"""Exception hierarchy.

Every error that can cross the wire carries a stable ``code`` string; the
client SDK maps received Error frames back to the same classes.
"""

from __future__ import annotations

_REGISTRY: dict[str, type["PlatformError"]] = {}


class PlatformError(Exception):
    code = "ERROR"

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        _REGISTRY[cls.code] = cls

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code

    def to_wire(self) -> dict:
        return {"code": self.code, "message": self.message}


def error_from_wire(payload: dict) -> PlatformError:
    cls = _REGISTRY.get(payload.get("code", ""), PlatformError)
    err = cls(payload.get("message", ""))
    if cls is PlatformError:
        err.code = payload.get("code", "ERROR")
    elif cls is NotLeader:
        err.leader = payload.get("leader")
    return err


class ValidationError(PlatformError):
    """Malformed input, configuration or request."""

    code = "VALIDATION_ERROR"


# identity

class CertificateError(PlatformError):
    code = "CERTIFICATE_ERROR"


class UnknownIssuer(CertificateError):
    code = "UNKNOWN_ISSUER"


class BadSignature(CertificateError):
    code = "BAD_SIGNATURE"


class Expired(CertificateError):
    code = "EXPIRED"


class NotYetValid(CertificateError):
    code = "NOT_YET_VALID"


class Revoked(CertificateError):
    code = "REVOKED"


class UnknownOrg(PlatformError):
    code = "UNKNOWN_ORG"


# ledger

class LedgerError(PlatformError):
    code = "LEDGER_ERROR"


class HeightMismatch(LedgerError):
    code = "HEIGHT_MISMATCH"


class PrevHashMismatch(LedgerError):
    code = "PREV_HASH_MISMATCH"


# ordering

class MessageTooLarge(PlatformError):
    code = "MESSAGE_TOO_LARGE"


class NotLeader(PlatformError):
    code = "NOT_LEADER"

    def __init__(self, message: str = "", leader: str | None = None):
        super().__init__(message)
        self.leader = leader

    def to_wire(self) -> dict:
        return {**super().to_wire(), "leader": self.leader}


class NoQuorum(PlatformError):
    code = "NO_QUORUM"


# execution and contracts

class UnknownOperation(PlatformError):
    code = "UNKNOWN_OPERATION"


class ContractError(PlatformError):
    code = "CONTRACT_ERROR"


class AccessDenied(ContractError):
    code = "ACCESS_DENIED"


class NotFound(ContractError):
    code = "NOT_FOUND"


class DeviceNotRegistered(ContractError):
    code = "DEVICE_NOT_REGISTERED"


class StaleVersion(ContractError):
    code = "STALE_VERSION"


class DuplicateRequestId(ContractError):
    code = "DUPLICATE_REQUEST_ID"


class ServiceNotFound(ContractError):
    code = "SERVICE_NOT_FOUND"


class RequestNotFound(ContractError):
    code = "REQUEST_NOT_FOUND"


class AlreadyResponded(ContractError):
    code = "ALREADY_RESPONDED"


class EndorsementMismatch(PlatformError):
    code = "ENDORSEMENT_MISMATCH"


class EndorsementFailure(PlatformError):
    """Endorsements required by the policy could not be collected."""

    code = "ENDORSEMENT_FAILURE"


class InvalidProposal(PlatformError):
    code = "INVALID_PROPOSAL"


# gateway

class AllPeersUnavailable(PlatformError):
    code = "ALL_PEERS_UNAVAILABLE"


class Timeout(PlatformError):
    code = "TIMEOUT"


class StreamClosed(PlatformError):
    code = "STREAM_CLOSED"


class SubscriberOverflow(StreamClosed):
    code = "SUBSCRIBER_OVERFLOW"


# auxiliary storage

class BlobNotFound(PlatformError):
    code = "BLOB_NOT_FOUND"


class IntegrityFailure(PlatformError):
    code = "INTEGRITY_FAILURE"


class StorageError(PlatformError):
    code = "STORAGE_ERROR"
